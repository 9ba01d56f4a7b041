"""Frozen causal-transformer knowledge source.

A small next-token LM over the synthetic text vocabulary stands in for a
large pretrained model: instruction-token embeddings are prefixed to
per-item text embeddings and one causal forward pass yields the
per-user knowledge matrix.  Low-rank adapters on the attention
query/value projections are the optional fine-tuning path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (AdamW, EncoderLayer, LayerNorm, Linear, Module,
                     causal_mask, padding_mask, param)


class ConfigurationError(ValueError):
    pass


@dataclass
class KnowledgeInput:
    prefix: Tensor            # (B, K, d_llm) instruction token embeddings
    body: Tensor              # (B, T, d_llm) item text embeddings
    valid: np.ndarray         # (B, K+T)


@dataclass
class KnowledgeMatrix:
    """Cached output hidden states for one user context."""
    hidden: np.ndarray        # (K+T, d_llm)
    user_id: str
    context_fingerprint: str
    valid: np.ndarray | None = None


def context_fingerprint(items: list[int], codebook_version: str) -> str:
    payload = ",".join(str(i) for i in items) + "|" + codebook_version
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class LoraAdapter(Module):
    """Low-rank delta for a frozen (d_in, d_out) weight: y += scale * x B^T A^T
    with A (d_out, r) starting at zero so the initial delta vanishes."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 rank: int, scale: float, dropout_rate: float = 0.0):
        if rank >= min(d_in, d_out):
            raise ConfigurationError(
                f"lora rank {rank} must be < min({d_in}, {d_out})")
        self.a = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        self.b = param(rng, (rank, d_in), scale=1.0 / np.sqrt(d_in))
        self.rank = rank
        self.scale = scale
        self.dropout_rate = dropout_rate

    def delta(self, x: Tensor, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        h = ad.matmul(x, ad.transpose(self.b, (1, 0)))
        if training and self.dropout_rate > 0.0 and rng is not None:
            keep = (rng.random(h.shape) >= self.dropout_rate) / (
                1.0 - self.dropout_rate)
            h = ad.mul(h, keep)
        return ad.scale(ad.matmul(h, ad.transpose(self.a, (1, 0))), self.scale)

    def merged_weight(self, base_weight: np.ndarray) -> np.ndarray:
        """Base (d_in, d_out) weight with the scaled low-rank delta folded in."""
        return base_weight + self.scale * (self.b.data.T @ self.a.data.T)


class LoraLinear(Module):
    def __init__(self, base: Linear, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter
        self.training = False
        self._rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.base(x)
        return ad.add(y, self.adapter.delta(x, self.training, self._rng))


def apply_lora(layer: Linear, adapter: LoraAdapter, x: Tensor,
               training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    return ad.add(layer(x), adapter.delta(x, training, rng))


class ToyLM(Module):
    """Causal transformer over the synthetic text vocabulary."""

    def __init__(self, rng: np.random.Generator, vocab: int = 256,
                 d_llm: int = 64, layers: int = 2, heads: int = 4,
                 d_ff: int = 128, t_max: int = 96):
        self.vocab = vocab
        self.d_llm = d_llm
        self.t_max = t_max
        self.embed = param(rng, (vocab, d_llm))
        self.pos = param(rng, (t_max, d_llm))
        self.blocks = [EncoderLayer(rng, d_llm, heads, d_ff)
                       for _ in range(layers)]
        self.ln = LayerNorm(d_llm)
        self.head = Linear(rng, d_llm, vocab)
        self.frozen = False
        self.forward_count = 0

    # -- adapters ----------------------------------------------------------

    def add_adapters(self, rng: np.random.Generator, rank: int = 8,
                     scale: float = 16.0, dropout_rate: float = 0.05):
        """Wrap every attention query/value projection with a LoRA path."""
        for block in self.blocks:
            for name in ("w_q", "w_v"):
                base = getattr(block.attn, name)
                if isinstance(base, LoraLinear):
                    continue
                d_in, d_out = base.weight.shape
                adapter = LoraAdapter(rng, d_in, d_out, rank, scale,
                                      dropout_rate)
                setattr(block.attn, name, LoraLinear(base, adapter))

    def adapter_modules(self) -> list[LoraAdapter]:
        out = []
        for block in self.blocks:
            for name in ("w_q", "w_v"):
                lin = getattr(block.attn, name)
                if isinstance(lin, LoraLinear):
                    out.append(lin.adapter)
        return out

    def set_adapter_training(self, training: bool,
                             rng: np.random.Generator | None = None):
        for block in self.blocks:
            for name in ("w_q", "w_v"):
                lin = getattr(block.attn, name)
                if isinstance(lin, LoraLinear):
                    lin.training = training
                    lin._rng = rng

    def base_parameters(self) -> list[Tensor]:
        skip = set()
        for adapter in self.adapter_modules():
            skip.update(id(p) for p in adapter.parameters())
        return [p for p in self.parameters() if id(p) not in skip]

    def freeze_base(self):
        for p in self.base_parameters():
            p.requires_grad = False
        self.frozen = True

    def base_checksum(self) -> float:
        total = 0.0
        for name, p in sorted(self.named_parameters()):
            if ".adapter." in name:
                continue
            total += float(np.sum(
                p.data * np.cos(np.arange(p.data.size).reshape(p.data.shape)
                                + 1.0)))
        return total

    def adapter_checksum(self) -> float:
        total = 0.0
        for adapter in self.adapter_modules():
            for p in adapter.parameters():
                total += float(np.sum(
                    p.data * np.cos(np.arange(p.data.size)
                                    .reshape(p.data.shape) + 1.0)))
        return total

    # -- forward -----------------------------------------------------------

    def embed_item_text(self, tokens: list[int]) -> Tensor:
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.size == 0:
            raise LookupError("item has no text tokens")
        if toks.min() < 0 or toks.max() >= self.vocab:
            raise LookupError(
                f"text token out of vocabulary [0, {self.vocab})")
        return ad.mean(ad.gather(self.embed, toks), axis=0)

    def hidden_states(self, x: Tensor, valid: np.ndarray) -> Tensor:
        """Causal forward pass over already-embedded inputs (B, S, d)."""
        self.forward_count += 1
        b, s, _ = x.shape
        if s > self.t_max:
            raise ad.ShapeError(f"sequence length {s} exceeds t_max {self.t_max}")
        x = ad.add(x, ad.slice_axis(self.pos, 0, 0, s))
        mask = causal_mask(s) + padding_mask(valid)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln(x)

    def lm_logits(self, token_ids: np.ndarray) -> Tensor:
        b, s = token_ids.shape
        x = ad.gather(self.embed, token_ids)
        states = self.hidden_states(x, np.ones((b, s)))
        return self.head(states)


def build_input(instruction_tokens: Tensor, text_embeds: Tensor,
                text_valid: np.ndarray) -> KnowledgeInput:
    """Prefix = instruction tokens, body = per-item text embeddings in
    chronological order."""
    b, k, _ = instruction_tokens.shape
    valid = np.concatenate([np.ones((b, k)), text_valid], axis=1)
    return KnowledgeInput(prefix=instruction_tokens, body=text_embeds,
                          valid=valid)


def extract_knowledge(kin: KnowledgeInput, model: ToyLM) -> Tensor:
    """All output hidden states of the causal pass over [prefix, body]."""
    if kin.prefix.shape[1] == 0:
        x = kin.body
    elif kin.body.shape[1] == 0:
        x = kin.prefix
    else:
        x = ad.concat([kin.prefix, kin.body], axis=1)
    out = model.hidden_states(x, kin.valid)
    ad._check_finite("extract_knowledge", out.data)
    return out


# ---------------------------------------------------------------------------
# pretraining


def unigram_entropy(corpus: list[list[int]]) -> float:
    counts: dict[int, int] = {}
    total = 0
    for stream in corpus:
        for tok in stream:
            counts[tok] = counts.get(tok, 0) + 1
            total += 1
    probs = np.array([c / total for c in counts.values()])
    return float(-(probs * np.log(probs)).sum())


def pretrain_toy_lm(corpus: list[list[int]], rng: np.random.Generator,
                    model: ToyLM | None = None, epochs: int = 10,
                    batch_size: int = 16, lr: float = 1e-3,
                    target_margin: float = 0.0) -> tuple[ToyLM, list[float]]:
    """Next-token training until the loss drops below the corpus unigram
    entropy; the model is frozen afterwards."""
    if not corpus:
        raise ConfigurationError("empty pretraining corpus")
    if model is None:
        model = ToyLM(rng)
    baseline = unigram_entropy(corpus)
    opt = AdamW(model.trainable_parameters(), lr=lr)
    width = min(max(len(c) for c in corpus), model.t_max)
    log: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        losses = []
        for lo in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[lo:lo + batch_size]]
            ids = np.zeros((len(batch), width), dtype=np.int64)
            mask = np.zeros((len(batch), width))
            for i, stream in enumerate(batch):
                s = stream[:width]
                ids[i, :len(s)] = s
                mask[i, :len(s)] = 1.0
            logits = model.lm_logits(ids)
            flat = ad.reshape(ad.slice_axis(logits, 1, 0, width - 1),
                              (len(batch) * (width - 1), model.vocab))
            nll = ad.nll_from_logits(flat, ids[:, 1:].reshape(-1))
            w = mask[:, 1:].reshape(-1)
            loss = ad.scale(ad.sum_(ad.mul(nll, w)), 1.0 / max(w.sum(), 1.0))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        log.append(float(np.mean(losses)))
        if log[-1] < baseline - target_margin:
            break
    model.freeze_base()
    return model, log


def deterministic_oracle(seed: int = 0, **kwargs) -> ToyLM:
    """Fixed seeded random-weight knowledge model, no pretraining."""
    model = ToyLM(np.random.default_rng(seed), **kwargs)
    model.freeze_base()
    return model
