"""Constrained training of the knowledge-conditioned recommender.

The policy model couples the semantic-ID backbone with the soft-instruction
extractor, the frozen knowledge model, and the fusion block.  Training
minimizes the recommendation loss subject to a reference-degradation
constraint via alternating primal descent / projected dual ascent on a
non-negative multiplier; a fixed-weight hinge penalty is the ablation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .backbone import (BackboneConfig, EncoderOutput, GRBackbone,
                       InteractionSequence)
from .fusion import FusionBlock, fuse_bos
from .instructions import (MlpContext, ParallelCodebooks, ResidualCodebooks,
                           pool_context)
from .knowledge import ToyLM, build_input, extract_knowledge
from .layers import SGD, AdamW, Linear, Module, clip_global_norm

VARIANTS = ("lwgr", "w/o_cons", "w/o_fus", "w/o_pcb", "rq", "fixed_beta")
STRATEGIES = ("frozen", "lora")


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, log: list[dict]):
        super().__init__(message)
        self.log = log


@dataclass
class DualState:
    lam: float = 0.05
    eta_lam: float = 5e-4
    eps: float = 1e-4
    delta: float = 1e-4
    beta: float | None = None

    def __post_init__(self):
        if self.lam < 0 or self.eps < 0 or self.delta < 0:
            raise ConfigurationError("dual state requires lam, eps, delta >= 0")


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    eta_theta: float = 1e-4
    eta_lambda: float = 5e-4
    lambda0: float = 0.05
    delta: float = 1e-4
    eps: float = 1e-4
    beta: float = 0.5
    variant: str = "lwgr"
    strategy: str = "frozen"
    optimizer: str = "sgd"
    clip_norm: float = 1.0
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.eta_theta <= 0:
            raise ConfigurationError("primal learning rate must be positive")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")

    def dual_state(self) -> DualState:
        lam0 = 0.0 if self.variant in ("w/o_cons", "fixed_beta") else self.lambda0
        return DualState(lam=lam0, eta_lam=self.eta_lambda, eps=self.eps,
                         delta=self.delta,
                         beta=self.beta if self.variant == "fixed_beta" else None)


@dataclass
class TrainSample:
    seq: InteractionSequence
    text: list[list[int]]     # per history item, token streams
    target_sid: tuple


# ---------------------------------------------------------------------------
# constrained-objective primitives


def margin_penalty(s_ref, s_theta, delta: float):
    """max(0, s_ref - s_theta - delta); differentiable in s_theta."""
    if delta < 0:
        raise ConfigurationError("tolerance margin must be >= 0")
    if isinstance(s_theta, Tensor) or isinstance(s_ref, Tensor):
        return ad.relu(ad.sub(ad.sub(s_ref, s_theta), delta))
    return max(0.0, s_ref - s_theta - delta)


def batch_constraint(s_ref: np.ndarray, s_theta: Tensor,
                     delta: float) -> Tensor:
    """Batch-mean hinge on the policy score falling below the reference."""
    if s_theta.shape[0] == 0:
        raise ConfigurationError("constraint needs a non-empty batch")
    return ad.mean(margin_penalty(Tensor(np.asarray(s_ref)), s_theta, delta))


def lagrangian_loss(l_rec, c, dual: DualState):
    if dual.lam < 0:
        raise ConfigurationError("multiplier must be non-negative")
    if isinstance(l_rec, Tensor) or isinstance(c, Tensor):
        return ad.add(l_rec, ad.scale(ad.sub(c, dual.eps), dual.lam))
    return l_rec + dual.lam * (c - dual.eps)


def fixed_beta_loss(l_rec, c, beta: float, eps: float):
    if beta < 0:
        raise ConfigurationError("penalty weight must be >= 0")
    if isinstance(l_rec, Tensor) or isinstance(c, Tensor):
        return ad.add(l_rec, ad.scale(ad.relu(ad.sub(c, eps)), beta))
    return l_rec + beta * max(0.0, c - eps)


def primal_step(params: list[Tensor], eta_theta: float,
                clip_norm: float = 1.0) -> float:
    """Clipped gradient-descent step; returns the pre-clip gradient norm."""
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(
                f"non-finite gradient in parameter of shape {p.shape}; "
                f"|grad| stats: max={np.nanmax(np.abs(p.grad))}")
    norm = clip_global_norm(params, clip_norm)
    for p in params:
        if p.grad is not None:
            p.data -= eta_theta * p.grad
    return norm


def dual_step(dual: DualState, c: float) -> DualState:
    dual.lam = max(0.0, dual.lam + dual.eta_lam * (c - dual.eps))
    return dual


# ---------------------------------------------------------------------------
# policy model


def embed_text_batch(lm: ToyLM, texts: list[list[list[int]]]
                     ) -> tuple[Tensor, np.ndarray]:
    """Per-user, per-item mean token embeddings.

    Returns (B, T, d_llm) embeddings and a (B, T) validity mask, T = the
    longest history in the batch."""
    b = len(texts)
    t = max((len(u) for u in texts), default=0)
    if t == 0:
        return Tensor(np.zeros((b, 0, lm.d_llm))), np.zeros((b, 0))
    w = max(max((len(s) for s in u), default=1) for u in texts)
    ids = np.zeros((b * t, w), dtype=np.int64)
    weight = np.zeros((b * t, w))
    valid = np.zeros((b, t))
    for i, u in enumerate(texts):
        for j, stream in enumerate(u):
            row = i * t + j
            ids[row, :len(stream)] = stream
            if stream:
                weight[row, :len(stream)] = 1.0 / len(stream)
            valid[i, j] = 1.0
    emb = ad.gather(lm.embed, ids)                       # (B*T, W, d)
    pooled = ad.sum_(ad.mul(emb, weight[:, :, None]), axis=1)
    return ad.reshape(pooled, (b, t, lm.d_llm)), valid


class KnowledgePolicy(Module):
    """Backbone + instruction extractor + knowledge model + fusion, wired
    according to the training variant."""

    def __init__(self, rng: np.random.Generator, backbone: GRBackbone,
                 knowledge: ToyLM | None, variant: str = "lwgr",
                 k_codebooks: int = 4, codewords: int = 16, tau: float = 1.0,
                 fusion_mode: str = "residual", fusion_heads: int = 4):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}")
        self.backbone = backbone
        self.knowledge = knowledge
        self.variant = variant
        d = backbone.cfg.d_model
        self.instruction = None
        self.fusion = None
        self.knowledge_to_enc = None
        if knowledge is not None:
            d_llm = knowledge.d_llm
            if variant == "w/o_pcb":
                self.instruction = MlpContext(rng, d, d_llm=d_llm)
            elif variant == "rq":
                self.instruction = ResidualCodebooks(
                    rng, d, depth=k_codebooks, codewords=codewords,
                    d_llm=d_llm, tau=tau)
            else:
                self.instruction = ParallelCodebooks(
                    rng, d, k=k_codebooks, codewords=codewords,
                    d_llm=d_llm, tau=tau)
            if variant == "w/o_fus":
                self.knowledge_to_enc = Linear(rng, d_llm, d)
            else:
                self.fusion = FusionBlock(rng, d, fusion_heads, d_llm,
                                          mode=fusion_mode)
                # start as an exact no-op so a reference-initialized
                # backbone scores identically before any training
                if fusion_mode == "residual":
                    self.fusion.attn.w_o.weight.data[:] = 0.0

    @property
    def uses_knowledge(self) -> bool:
        return self.knowledge is not None

    def knowledge_matrix(self, enc: EncoderOutput,
                         texts: list[list[list[int]]]
                         ) -> tuple[Tensor, np.ndarray]:
        """World-knowledge hidden states H for a batch of users."""
        instruction = self.instruction(pool_context(enc))
        body, text_valid = embed_text_batch(self.knowledge, texts)
        kin = build_input(instruction.tokens, body, text_valid)
        return extract_knowledge(kin, self.knowledge), kin.valid

    def decode_inputs(self, seqs: list[InteractionSequence],
                      texts: list[list[list[int]]] | None,
                      sid_matrix: np.ndarray,
                      cached: tuple[np.ndarray, np.ndarray] | None = None
                      ) -> tuple[EncoderOutput, Tensor]:
        """Encoder memory and fused start state for a batch of users.

        ``cached`` supplies a precomputed (H, valid) pair, bypassing the
        knowledge model entirely (the serving path)."""
        enc = self.backbone.encode(seqs, sid_matrix)
        q0 = self.backbone.bos_state(len(seqs))
        if not self.uses_knowledge and cached is None:
            return enc, q0
        if cached is not None:
            h: Tensor | np.ndarray = Tensor(cached[0])
            h_valid = cached[1]
        else:
            h, h_valid = self.knowledge_matrix(enc, texts)
        if self.variant == "w/o_fus":
            projected = self.knowledge_to_enc(h)
            memory = ad.concat([enc.hidden, projected], axis=1)
            valid = np.concatenate([enc.valid, h_valid], axis=1)
            return EncoderOutput(hidden=memory, valid=valid), q0
        return enc, fuse_bos(self.fusion, ad.reshape(
            q0, (len(seqs), 1, self.backbone.cfg.d_model)), h, h_valid)

    def _squeeze_q0(self, q0: Tensor, b: int) -> Tensor:
        if q0.ndim == 3:
            return ad.reshape(q0, (b, self.backbone.cfg.d_model))
        return q0

    def batch_nll(self, samples: list[TrainSample],
                  sid_matrix: np.ndarray) -> Tensor:
        seqs = [s.seq for s in samples]
        texts = [s.text for s in samples]
        enc, q0 = self.decode_inputs(seqs, texts, sid_matrix)
        targets = np.asarray([s.target_sid for s in samples])
        return self.backbone.sequence_nll(
            enc, self._squeeze_q0(q0, len(samples)), targets)

    def batch_scores(self, samples: list[TrainSample],
                     sid_matrix: np.ndarray) -> tuple[Tensor, Tensor]:
        """(per-sample nll, per-sample mean-token-log-prob score)."""
        nll = self.batch_nll(samples, sid_matrix)
        return nll, ad.scale(nll, -1.0 / self.backbone.n_levels)


def reference_scores(reference: GRBackbone, samples: list[TrainSample],
                     sid_matrix: np.ndarray) -> np.ndarray:
    """Mean-token-log-prob of each true target under the frozen reference,
    evaluated without any knowledge path."""
    with ad.no_grad():
        enc = reference.encode([s.seq for s in samples], sid_matrix)
        nll = reference.sequence_nll(
            enc, reference.bos_state(len(samples)),
            np.asarray([s.target_sid for s in samples]))
    return -nll.data / reference.n_levels


# ---------------------------------------------------------------------------
# training loops


def pretrain_backbone(backbone: GRBackbone, samples: list[TrainSample],
                      sid_matrix: np.ndarray, rng: np.random.Generator,
                      steps: int = 150, batch_size: int = 32,
                      lr: float = 3e-3) -> list[float]:
    """Plain recommendation-loss training (used for the reference model)."""
    opt = AdamW(backbone.trainable_parameters(), lr=lr)
    log = []
    for _ in range(steps):
        batch = [samples[i] for i in
                 rng.choice(len(samples), size=min(batch_size, len(samples)),
                            replace=False)]
        enc = backbone.encode([s.seq for s in batch], sid_matrix)
        nll = backbone.sequence_nll(
            enc, backbone.bos_state(len(batch)),
            np.asarray([s.target_sid for s in batch]))
        loss = ad.mean(nll)
        opt.zero_grad()
        ad.backward(loss)
        clip_global_norm(backbone.trainable_parameters(), 1.0)
        opt.step()
        log.append(float(loss.data))
    return log


def train(config: TrainConfig, policy: KnowledgePolicy,
          reference: GRBackbone, samples: list[TrainSample],
          sid_matrix: np.ndarray) -> tuple[KnowledgePolicy, list[dict]]:
    """Alternating primal/dual updates on the constrained objective."""
    if not samples:
        raise ConfigurationError("no training samples")
    rng = np.random.default_rng(config.seed)
    dual = config.dual_state()
    params = policy.trainable_parameters()
    opt = AdamW(params, lr=config.eta_theta) \
        if config.optimizer == "adamw" else None
    log: list[dict] = []
    initial_loss = None
    for step in range(config.steps):
        batch = [samples[i] for i in
                 rng.choice(len(samples),
                            size=min(config.batch_size, len(samples)),
                            replace=False)]
        nll, s_theta = policy.batch_scores(batch, sid_matrix)
        l_rec = ad.mean(nll)
        s_ref = reference_scores(reference, batch, sid_matrix)
        c = batch_constraint(s_ref, s_theta, dual.delta)

        if config.variant == "fixed_beta":
            total = fixed_beta_loss(l_rec, c, config.beta, dual.eps)
        elif config.variant == "w/o_cons":
            total = l_rec
        else:
            total = lagrangian_loss(l_rec, c, dual)

        policy.zero_grad()
        ad.backward(total)
        if opt is not None:
            for p in params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError("non-finite gradient")
            grad_norm = clip_global_norm(params, config.clip_norm)
            opt.step()
        else:
            grad_norm = primal_step(params, config.eta_theta,
                                    config.clip_norm)
        if config.variant not in ("w/o_cons", "fixed_beta"):
            dual_step(dual, float(c.data))

        row = {"step": step, "loss_rec": float(l_rec.data),
               "constraint": float(c.data), "lambda": dual.lam,
               "loss_total": float(total.data), "grad_norm": grad_norm}
        log.append(row)
        if initial_loss is None:
            initial_loss = abs(row["loss_total"]) + 1e-9
        if abs(row["loss_total"]) > config.divergence_factor * initial_loss:
            raise TrainingDiverged(
                f"loss {row['loss_total']} exceeded "
                f"{config.divergence_factor}x initial", log)
    return policy, log


def write_train_log_csv(path: str, log: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=[
            "step", "loss_rec", "constraint", "lambda", "loss_total",
            "grad_norm"])
        writer.writeheader()
        writer.writerows(log)


# ---------------------------------------------------------------------------
# full-objective gradient verification


def full_loss_grad_check(seed: int = 0, h: float = 1e-5) -> float:
    """Finite-difference check of the complete constrained objective —
    recommendation loss through the straight-through instruction path and
    the hinged degradation constraint — on a 2-sample micro-batch.

    Returns the max relative gap between analytic and central-difference
    gradients over a representative parameter set."""
    from .sid import fit_catalog
    from .worldgen import CohortSpec, WorldSpec, generate_world

    spec = WorldSpec(
        cohorts=[CohortSpec("a", 3, 1.0), CohortSpec("b", 3, -1.0)],
        n_items=16, n_topics=2, vocab=32, tokens_per_item=3, d_content=4,
        min_interactions=5, max_interactions=6)
    world = generate_world(spec, seed)
    catalog = fit_catalog([f"i{j}" for j in range(16)], world.item_content,
                          [[0]] * 16, levels=2, m=4, seed=seed)
    sm = np.array([s.as_sequence() for s in catalog.sids], dtype=np.int64)

    rng = np.random.default_rng(seed + 1)
    cfg = BackboneConfig(d_model=8, heads=2, enc_layers=1, dec_layers=1,
                         d_ff=16, t_max=8)
    backbone = GRBackbone(rng, catalog.vocab_sizes, cfg)
    from .knowledge import ToyLM
    lm = ToyLM(np.random.default_rng(seed + 2), vocab=32, d_llm=8,
               layers=1, heads=2, d_ff=16, t_max=16)
    lm.freeze_base()
    policy = KnowledgePolicy(rng, backbone, lm, k_codebooks=2, codewords=4,
                             tau=1.0, fusion_mode="replace", fusion_heads=2)

    users = world.users[:2]
    samples = [TrainSample(
        seq=InteractionSequence(str(u.user_id), u.items[:3]),
        text=u.text[:3],
        target_sid=catalog.sids[u.items[3]].as_sequence()) for u in users]

    dual = DualState(lam=0.05, eta_lam=5e-4, eps=1e-4, delta=1e-4)
    with ad.no_grad():
        _, s0 = policy.batch_scores(samples, sm)
    # one sample inside the hinge, one safely outside it
    s_ref = s0.data + np.array([0.5, -0.5])

    def f():
        nll, s_theta = policy.batch_scores(samples, sm)
        c = batch_constraint(s_ref, s_theta, dual.delta)
        return lagrangian_loss(ad.mean(nll), c, dual)

    params = [policy.instruction.projections[0].weight,
              policy.instruction.books[0],
              policy.instruction.books[1],
              policy.instruction.to_llm[0],
              policy.fusion.attn.w_o.weight,
              policy.backbone.bos,
              policy.backbone.token_tables[0],
              policy.backbone.out_proj[0].weight]
    err = ad.grad_check(f, params, h=h)
    if err > 1e-6:
        # a relu preactivation within h of zero makes the central
        # difference straddle the kink; a smaller step that no longer
        # crosses it distinguishes that artifact from a wrong gradient
        err = min(err, ad.grad_check(f, params, h=h / 3))
    return err


# ---------------------------------------------------------------------------
# analytic toy problems


def primal_dual_toy(f_grad, constraint, constraint_grad, x0: float = 0.0,
                    lam0: float = 0.0, eta_x: float = 0.01,
                    eta_lam: float = 0.01, eps: float = 5e-3,
                    steps: int = 10000
                    ) -> tuple[float, float, list[tuple[float, float]]]:
    """Scalar primal descent / projected dual ascent on
    f(x) + lam * c(x) with c a hinge constraint."""
    x, lam = x0, lam0
    history = []
    for _ in range(steps):
        x -= eta_x * (f_grad(x) + lam * constraint_grad(x))
        lam = max(0.0, lam + eta_lam * (constraint(x) - eps))
        history.append((x, lam))
    return x, lam, history
