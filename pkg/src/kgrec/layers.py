"""Transformer building blocks on top of the autodiff engine.

All modules operate on batched tensors of shape (B, T, d). Attention
masks are additive constants: 0 where attention is allowed, a large
negative number where it is not.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = -1e9


class Module:
    """Parameter container with recursive traversal."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{full}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            p.data[...] = state[name]

    def checksum(self) -> float:
        """Order-stable scalar fingerprint of all parameter values."""
        total = 0.0
        for name, p in sorted(self.named_parameters()):
            total += float(np.sum(p.data * np.cos(np.arange(p.data.size)
                                                  .reshape(p.data.shape) + 1.0)))
        return total


def param(rng: np.random.Generator, shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[-1])
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(rng, (d_in, d_out), scale=1.0 / np.sqrt(d_in))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class MultiHeadAttention(Module):
    """Attention of queries over keys/values, optionally from a different
    source sequence (cross-attention)."""

    def __init__(self, rng, d_model: int, heads: int, d_kv: int | None = None):
        if d_model % heads != 0:
            raise ad.ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        d_kv = d_kv if d_kv is not None else d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.w_q = Linear(rng, d_model, d_model, bias=False)
        self.w_k = Linear(rng, d_kv, d_model, bias=False)
        self.w_v = Linear(rng, d_kv, d_model, bias=False)
        self.w_o = Linear(rng, d_model, d_model, bias=False)

    def __call__(self, query: Tensor, memory: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        q = split_heads(self.w_q(query), self.heads)
        k = split_heads(self.w_k(memory), self.heads)
        v = split_heads(self.w_v(memory), self.heads)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = ad.add(scores, mask)
        attn = ad.softmax(scores, axis=-1)
        return self.w_o(merge_heads(ad.matmul(attn, v)))

    def attention_weights(self, query: Tensor, memory: Tensor,
                          mask: np.ndarray | None = None) -> np.ndarray:
        q = split_heads(self.w_q(query), self.heads)
        k = split_heads(self.w_k(memory), self.heads)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = ad.add(scores, mask)
        return ad.softmax(scores, axis=-1).data


class FeedForward(Module):
    def __init__(self, rng, d_model: int, d_hidden: int):
        self.fc1 = Linear(rng, d_model, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, d_model: int, heads: int, d_ff: int):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, heads)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, mask))
        return ad.add(x, self.ff(self.ln2(x)))


class DecoderLayer(Module):
    def __init__(self, rng, d_model: int, heads: int, d_ff: int,
                 d_memory: int | None = None):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, heads)
        self.ln2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, heads, d_kv=d_memory)
        self.ln3 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, memory: Tensor,
                 causal_mask: np.ndarray | None,
                 memory_mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.self_attn(h, h, causal_mask))
        x = ad.add(x, self.cross_attn(self.ln2(x), memory, memory_mask))
        return ad.add(x, self.ff(self.ln3(x)))


def causal_mask(t: int) -> np.ndarray:
    m = np.zeros((1, 1, t, t))
    m[..., np.triu_indices(t, k=1)[0], np.triu_indices(t, k=1)[1]] = MASK_NEG
    return m


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, S) validity indicator -> additive (B, 1, 1, S) mask."""
    return np.where(valid[:, None, None, :] > 0, 0.0, MASK_NEG)


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class AdamW:
    """Adaptive-moment option mirroring common practice; SGD remains the
    contract-tested default."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
