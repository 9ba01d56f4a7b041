"""Encoder-decoder recommender over semantic-ID tokens.

The encoder reads a user's interaction history with items flattened to
their SID tokens (summed with item-position and level embeddings); the
decoder autoregressively emits one SID token per level, the collision
suffix as the final level.  Likelihood, mean-token-log-prob scoring and
trie-constrained beam search live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (DecoderLayer, EncoderLayer, LayerNorm, Linear, Module,
                     causal_mask, padding_mask, param)
from .sid import Catalog, PrefixTrie


class ConfigurationError(ValueError):
    pass


@dataclass
class BackboneConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    t_max: int = 16


@dataclass
class InteractionSequence:
    user_id: str
    items: list[int]          # catalog indices, chronological


@dataclass
class EncoderOutput:
    hidden: Tensor            # (B, S, d)
    valid: np.ndarray         # (B, S) 1 = real token, 0 = padding

    def pooled(self) -> Tensor:
        """Mean over valid positions, one row per batch element."""
        if not self.valid.any(axis=1).all():
            raise ad.ShapeError("pooling requires at least one valid position")
        w = self.valid / self.valid.sum(axis=1, keepdims=True)
        weighted = ad.mul(self.hidden, w[:, :, None])
        return ad.sum_(weighted, axis=1)


def catalog_sid_matrix(catalog: Catalog) -> np.ndarray:
    return np.array([s.as_sequence() for s in catalog.sids], dtype=np.int64)


class GRBackbone(Module):
    def __init__(self, rng: np.random.Generator, vocab_sizes: list[int],
                 config: BackboneConfig | None = None):
        cfg = config or BackboneConfig()
        self.cfg = cfg
        self.vocab_sizes = list(vocab_sizes)
        self.n_levels = len(vocab_sizes)
        d = cfg.d_model
        self.token_tables = [param(rng, (v, d)) for v in vocab_sizes]
        self.item_pos = param(rng, (cfg.t_max, d))
        self.level_emb = param(rng, (self.n_levels, d))
        self.dec_pos = param(rng, (self.n_levels, d))
        self.bos = param(rng, (d,))
        self.encoder = [EncoderLayer(rng, d, cfg.heads, cfg.d_ff)
                        for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d)
        self.decoder = [DecoderLayer(rng, d, cfg.heads, cfg.d_ff)
                        for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d)
        self.out_proj = [Linear(rng, d, v) for v in vocab_sizes]

    # -- encoding -----------------------------------------------------------

    def encode(self, seqs: list[InteractionSequence],
               sid_matrix: np.ndarray) -> EncoderOutput:
        if any(len(s.items) == 0 for s in seqs):
            raise ad.ShapeError("encode: empty interaction sequence")
        n = self.n_levels
        b = len(seqs)
        t = min(max(len(s.items) for s in seqs), self.cfg.t_max)
        tokens = np.zeros((b, t, n), dtype=np.int64)
        valid_items = np.zeros((b, t))
        for i, s in enumerate(seqs):
            items = s.items[-t:]
            for idx in items:
                if idx < 0 or idx >= sid_matrix.shape[0]:
                    raise LookupError(f"unknown item index {idx}")
            tokens[i, :len(items)] = sid_matrix[items]
            valid_items[i, :len(items)] = 1.0

        per_level = []
        for lvl in range(n):
            emb = ad.gather(self.token_tables[lvl], tokens[:, :, lvl])
            per_level.append(ad.reshape(emb, (b, t, 1, self.cfg.d_model)))
        x = ad.reshape(ad.concat(per_level, axis=2),
                       (b, t * n, self.cfg.d_model))

        item_idx = np.repeat(np.arange(t), n)[None, :].repeat(b, axis=0)
        level_idx = np.tile(np.arange(n), t)[None, :].repeat(b, axis=0)
        x = ad.add(x, ad.gather(self.item_pos, item_idx))
        x = ad.add(x, ad.gather(self.level_emb, level_idx))

        valid = np.repeat(valid_items, n, axis=1)
        mask = padding_mask(valid)
        for layer in self.encoder:
            x = layer(x, mask)
        return EncoderOutput(hidden=self.enc_ln(x), valid=valid)

    # -- decoding -----------------------------------------------------------

    def bos_state(self, batch: int) -> Tensor:
        return ad.add(ad.reshape(self.bos, (1, self.cfg.d_model)),
                      Tensor(np.zeros((batch, self.cfg.d_model))))

    def decode_states(self, enc: EncoderOutput, q0: Tensor,
                      prefix: np.ndarray) -> Tensor:
        """Decoder hidden states for inputs [q0, tok_0, .., tok_{t-1}]."""
        b = q0.shape[0]
        d = self.cfg.d_model
        t = prefix.shape[1] if prefix.size else 0
        parts = [ad.reshape(q0, (b, 1, d))]
        for j in range(t):
            emb = ad.gather(self.token_tables[j], prefix[:, j])
            emb = ad.add(emb, ad.slice_axis(self.dec_pos, 0, j + 1, j + 2))
            parts.append(ad.reshape(emb, (b, 1, d)))
        x = ad.concat(parts, axis=1)
        cmask = causal_mask(t + 1)
        mmask = padding_mask(enc.valid)
        for layer in self.decoder:
            x = layer(x, enc.hidden, cmask, mmask)
        return self.dec_ln(x)

    def level_logits(self, states: Tensor, lvl: int) -> Tensor:
        row = ad.slice_axis(states, 1, lvl, lvl + 1)
        out = self.out_proj[lvl](row)
        return ad.reshape(out, (out.shape[0], self.vocab_sizes[lvl]))

    def sequence_nll(self, enc: EncoderOutput, q0: Tensor,
                     targets: np.ndarray) -> Tensor:
        """Per-sample negative log-likelihood summed over SID levels."""
        targets = np.asarray(targets, dtype=np.int64)
        states = self.decode_states(enc, q0, targets[:, :-1])
        total = None
        for lvl in range(self.n_levels):
            nll = ad.nll_from_logits(self.level_logits(states, lvl),
                                     targets[:, lvl])
            total = nll if total is None else ad.add(total, nll)
        return total

    # -- spec surface: per-sequence loss / score ----------------------------

    def nll_loss(self, seq: InteractionSequence, target_sid: tuple,
                 sid_matrix: np.ndarray, q0: Tensor | None = None) -> Tensor:
        enc = self.encode([seq], sid_matrix)
        if q0 is None:
            q0 = self.bos_state(1)
        nll = self.sequence_nll(enc, q0, np.asarray([target_sid]))
        return ad.sum_(nll)

    def score_item(self, seq: InteractionSequence, target_sid: tuple,
                   sid_matrix: np.ndarray, q0: Tensor | None = None) -> float:
        with ad.no_grad():
            loss = self.nll_loss(seq, target_sid, sid_matrix, q0=q0)
        return -float(loss.data) / self.n_levels

    # -- retrieval ----------------------------------------------------------

    def score_catalog(self, enc_row: EncoderOutput, q0_row: Tensor,
                      sid_matrix: np.ndarray) -> np.ndarray:
        """Mean token log-probability of every catalog item for one user."""
        n_items = sid_matrix.shape[0]
        with ad.no_grad():
            q0 = Tensor(np.broadcast_to(q0_row.data.reshape(1, -1),
                                        (n_items, self.cfg.d_model)).copy())
            nll = self.sequence_nll(enc_row, q0, sid_matrix)
        return -nll.data / self.n_levels

    def generate_topk(self, enc_row: EncoderOutput, q0_row: Tensor,
                      trie: PrefixTrie, catalog: Catalog, k: int,
                      beam: int) -> list[tuple[int, float]]:
        """Top-k catalog items by sequence log-probability, every emitted
        prefix trie-valid; ties broken by ascending item_id."""
        if beam < k:
            raise ConfigurationError(f"beam width {beam} < k {k}")
        d = self.cfg.d_model
        beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
        with ad.no_grad():
            for lvl in range(self.n_levels):
                prefixes = np.array([b[0] for b in beams],
                                    dtype=np.int64).reshape(len(beams), lvl)
                q0 = Tensor(np.broadcast_to(q0_row.data.reshape(1, -1),
                                            (len(beams), d)).copy())
                states = self.decode_states(enc_row, q0, prefixes)
                logp = ad.log_softmax(self.level_logits(states, lvl)).data
                candidates = []
                for i, (prefix, score) in enumerate(beams):
                    for tok in trie.valid_next(prefix):
                        candidates.append(
                            (prefix + (tok,), score + float(logp[i, tok])))
                candidates.sort(key=lambda c: (-c[1], c[0]))
                beams = candidates[:beam]

        # rescore complete sequences with the teacher-forced path so the
        # ranking is float-identical to exhaustive catalog scoring
        seqs = np.array([b[0] for b in beams], dtype=np.int64)
        with ad.no_grad():
            q0 = Tensor(np.broadcast_to(q0_row.data.reshape(1, -1),
                                        (len(beams), d)).copy())
            nll = self.sequence_nll(enc_row, q0, seqs).data
        ranked = []
        for row, total in zip(seqs, -nll):
            item = catalog.sid_to_item[tuple(int(t) for t in row)]
            ranked.append((item, float(total)))
        ranked.sort(key=lambda r: (-r[1], catalog.item_ids[r[0]]))
        return ranked[:min(k, catalog.size)]


def exhaustive_topk(model: GRBackbone, enc_row: EncoderOutput, q0_row: Tensor,
                    catalog: Catalog, k: int) -> list[tuple[int, float]]:
    """Rank the full catalog by sequence log-probability (oracle path)."""
    sid_matrix = catalog_sid_matrix(catalog)
    scores = model.score_catalog(enc_row, q0_row, sid_matrix) * model.n_levels
    order = sorted(range(catalog.size),
                   key=lambda i: (-scores[i], catalog.item_ids[i]))
    return [(i, float(scores[i])) for i in order[:k]]
