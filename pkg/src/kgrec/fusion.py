"""Injecting cached user-knowledge states into the recommender decoder.

The decoder's start-of-sequence state attends once over the per-user
knowledge matrix through a dedicated cross-attention block; the result
either replaces the start state or is added to it as a residual.  An
empty knowledge matrix bypasses the block entirely so ablations without
the knowledge path share the same code route.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MASK_NEG, Module, MultiHeadAttention


class FusionBlock(Module):
    """Single-query cross-attention from the start state into the
    knowledge matrix, with a choice of replace or residual combination."""

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int,
                 d_knowledge: int, mode: str = "replace"):
        if mode not in ("replace", "residual"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.attn = MultiHeadAttention(rng, d_model, heads, d_kv=d_knowledge)
        self.mode = mode

    def __call__(self, q0: Tensor, knowledge: Tensor,
                 valid: np.ndarray | None = None) -> Tensor:
        """q0: (B, 1, d_model); knowledge: (B, M, d_knowledge).

        M = 0 returns q0 unchanged (no knowledge available)."""
        if knowledge.shape[1] == 0:
            return q0
        mask = None
        if valid is not None:
            mask = np.where(valid[:, None, None, :] > 0, 0.0, MASK_NEG)
        attended = self.attn(q0, knowledge, mask)
        if self.mode == "replace":
            return attended
        return ad.add(q0, attended)


def fuse_bos(block: FusionBlock | None, q0: Tensor,
             knowledge: Tensor | None,
             valid: np.ndarray | None = None) -> Tensor:
    """Apply the fusion block when both it and a knowledge matrix exist."""
    if block is None or knowledge is None:
        return q0
    return block(q0, knowledge, valid)


def attention_oracle(q: np.ndarray, m: np.ndarray,
                     w_q: np.ndarray, w_k: np.ndarray, w_v: np.ndarray,
                     w_o: np.ndarray, heads: int,
                     mask: np.ndarray | None = None) -> np.ndarray:
    """Loop-based multi-head attention for verifying the batched version."""
    b, tq, d = q.shape
    dh = d // heads
    qp = q @ w_q
    kp = m @ w_k
    vp = m @ w_v
    out = np.zeros((b, tq, d))
    for bi in range(b):
        head_outs = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = qp[bi][:, sl] @ kp[bi][:, sl].T / np.sqrt(dh)
            if mask is not None:
                mm = np.broadcast_to(mask, (b, heads) + scores.shape)
                scores = scores + mm[bi, h]
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            head_outs.append(a @ vp[bi][:, sl])
        out[bi] = np.concatenate(head_outs, axis=-1) @ w_o
    return out
