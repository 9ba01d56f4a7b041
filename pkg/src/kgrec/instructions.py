"""Personalized soft instructions from the pooled user context.

Parallel codebooks: the context vector is projected into K subspaces and
each projection is quantized to its nearest codeword.  The forward pass
keeps the hard selection; the backward pass routes gradients through the
softmax over negative squared distances, so every codeword with nonzero
probability is trainable.  A residual-quantization variant and a plain
MLP projection variant cover the ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EncoderOutput
from .layers import Linear, Module, param


@dataclass
class SoftInstruction:
    indices: np.ndarray            # (B, K) hard codeword choices
    distributions: list[Tensor]    # K tensors of shape (B, m)
    st_vectors: list[Tensor]       # K tensors of shape (B, d_k)
    tokens: Tensor                 # (B, K, d_llm)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


def pool_context(enc: EncoderOutput) -> Tensor:
    """Mean over valid encoder positions -> one context vector per user."""
    return enc.pooled()


def quantize_st(u: Tensor, book: Tensor, tau: float):
    """Nearest-codeword quantization with straight-through gradients.

    Returns (indices, distribution, st_vector).  The st_vector's forward
    value is exactly the selected codeword row; the added soft term
    (p - sg[p]) @ book is identically zero in the forward pass and
    carries the gradient of the soft path in the backward pass.
    """
    if tau <= 0:
        raise ad.ShapeError(f"quantize_st: tau must be positive, got {tau}")
    u2 = ad.sum_(ad.mul(u, u), axis=1, keepdims=True)
    b2 = ad.sum_(ad.mul(book, book), axis=1)
    cross = ad.matmul(u, ad.transpose(book, (1, 0)))
    # similarity = negative squared euclidean distance
    alpha = ad.sub(ad.scale(cross, 2.0), ad.add(u2, b2))
    p = ad.softmax(alpha, temperature=tau, axis=-1)
    indices = ad.frozen_array(p.data.argmax(axis=1))
    hard = ad.gather(book, indices)
    soft_zero = ad.matmul(ad.sub(p, ad.stop_gradient(p)), book)
    st = ad.add(hard, soft_zero)
    return indices, p, st


class ParallelCodebooks(Module):
    """K subspace projections + codebooks + per-subspace maps into the
    knowledge model's embedding space."""

    def __init__(self, rng: np.random.Generator, d: int, k: int = 5,
                 codewords: int = 32, d_llm: int = 64, tau: float = 1.0,
                 usage_entropy_weight: float = 0.0):
        if not 1 <= k <= d:
            raise ad.ShapeError(f"need 1 <= K <= context dim, got K={k}, d={d}")
        self.k = k
        self.d_k = d // k
        self.tau = tau
        self.usage_entropy_weight = usage_entropy_weight
        # rotation-then-split init: subspace projections start as slices of
        # one orthogonal matrix, then train freely
        ortho = np.linalg.qr(rng.normal(size=(d, d)))[0]
        self.projections = []
        for i in range(k):
            lin = Linear(rng, d, self.d_k)
            lin.weight.data[...] = ortho[:, i * self.d_k:(i + 1) * self.d_k]
            self.projections.append(lin)
        self.books = [param(rng, (codewords, self.d_k),
                            scale=1.0 / np.sqrt(self.d_k)) for _ in range(k)]
        self.to_llm = [param(rng, (self.d_k, d_llm)) for _ in range(k)]
        self.d_llm = d_llm

    def project_subspaces(self, h: Tensor) -> list[Tensor]:
        return [proj(h) for proj in self.projections]

    def __call__(self, h: Tensor) -> SoftInstruction:
        subs = self.project_subspaces(h)
        idx_cols, dists, sts, toks = [], [], [], []
        for u, book, w in zip(subs, self.books, self.to_llm):
            indices, p, st = quantize_st(u, book, self.tau)
            idx_cols.append(indices)
            dists.append(p)
            sts.append(st)
            t = ad.matmul(st, w)
            toks.append(ad.reshape(t, (t.shape[0], 1, self.d_llm)))
        return SoftInstruction(
            indices=np.stack(idx_cols, axis=1),
            distributions=dists,
            st_vectors=sts,
            tokens=ad.concat(toks, axis=1))

    def usage_entropy_penalty(self, instruction: SoftInstruction) -> Tensor:
        """Negative entropy of mean codeword usage; weight 0 disables it."""
        total = Tensor(0.0)
        for p in instruction.distributions:
            mean_p = ad.mean(p, axis=0)
            log_detached = np.log(np.maximum(mean_p.data, 1e-12))
            total = ad.add(total, ad.sum_(ad.mul(mean_p, log_detached)))
        return ad.scale(total, self.usage_entropy_weight)


class ResidualCodebooks(Module):
    """Ablation variant: residual quantization of the full projected
    context against shared-dimension codebooks."""

    def __init__(self, rng: np.random.Generator, d: int, depth: int = 5,
                 codewords: int = 32, d_llm: int = 64, tau: float = 1.0):
        if depth < 1:
            raise ad.ShapeError(f"residual depth must be >= 1, got {depth}")
        self.depth = depth
        self.tau = tau
        self.d_llm = d_llm
        self.proj = Linear(rng, d, d)
        self.books = [param(rng, (codewords, d), scale=1.0 / np.sqrt(d))
                      for _ in range(depth)]
        self.to_llm = [param(rng, (d, d_llm)) for _ in range(depth)]

    def __call__(self, h: Tensor) -> SoftInstruction:
        u = self.proj(h)
        return self.quantize_rq(u)

    def quantize_rq(self, u: Tensor) -> SoftInstruction:
        residual = u
        idx_cols, dists, sts, toks = [], [], [], []
        for book, w in zip(self.books, self.to_llm):
            indices, p, st = quantize_st(residual, book, self.tau)
            idx_cols.append(indices)
            dists.append(p)
            sts.append(st)
            t = ad.matmul(st, w)
            toks.append(ad.reshape(t, (t.shape[0], 1, self.d_llm)))
            residual = ad.sub(residual, st)
        return SoftInstruction(
            indices=np.stack(idx_cols, axis=1),
            distributions=dists,
            st_vectors=sts,
            tokens=ad.concat(toks, axis=1))

    def reconstruction_error(self, u: Tensor) -> float:
        inst = self.quantize_rq(u)
        approx = inst.st_vectors[0].data.copy()
        for st in inst.st_vectors[1:]:
            approx += st.data
        return float(np.linalg.norm(u.data - approx))


class MlpContext(Module):
    """Ablation variant: no codebooks, a two-layer MLP maps the pooled
    context straight into one knowledge-space token."""

    def __init__(self, rng: np.random.Generator, d: int, d_llm: int = 64):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, d_llm)
        self.d_llm = d_llm

    def __call__(self, h: Tensor) -> SoftInstruction:
        t = self.fc2(ad.relu(self.fc1(h)))
        b = t.shape[0]
        return SoftInstruction(
            indices=np.zeros((b, 0), dtype=np.int64),
            distributions=[],
            st_vectors=[],
            tokens=ad.reshape(t, (b, 1, self.d_llm)))
