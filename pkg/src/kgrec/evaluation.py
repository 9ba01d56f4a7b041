"""Leave-one-out metrics, ablation harness, and codebook-count sweep."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import (GRBackbone, InteractionSequence, catalog_sid_matrix)
from .sid import Catalog
from .trainer import (KnowledgePolicy, TrainConfig, TrainSample,
                      pretrain_backbone, train)
from .worldgen import Split, SyntheticWorld, leave_one_out_split


class ContractViolation(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _check_ranking(ranked: list, k: int):
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if len(set(ranked)) != len(ranked):
        raise ContractViolation("ranked list contains duplicates")


def recall_at_k(ranked: list, target, k: int) -> int:
    _check_ranking(ranked, k)
    return 1 if target in ranked[:k] else 0


def ndcg_at_k(ranked: list, target, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) with 1-based rank."""
    _check_ranking(ranked, k)
    for pos, item in enumerate(ranked[:k], start=1):
        if item == target:
            return 1.0 / math.log2(pos + 1)
    return 0.0


# ---------------------------------------------------------------------------
# per-user ranking + reports


@dataclass
class EvalReport:
    variant: str
    seed: int
    rows: list[dict] = field(default_factory=list)

    def value(self, metric: str, cohort: str = "all") -> float:
        for r in self.rows:
            if r["metric"] == metric and r["cohort"] == cohort:
                return r["value"]
        raise KeyError((metric, cohort))


@dataclass
class EvalCase:
    user_id: int
    cohort: str
    seq: InteractionSequence
    text: list[list[int]]
    target: int               # catalog item index


def eval_cases(world: SyntheticWorld, split: Split,
               stage: str = "test") -> list[EvalCase]:
    cases = []
    for u in world.users:
        if u.user_id not in split.test:
            continue
        if stage == "test":
            history, target = u.items[:-1], split.test[u.user_id]
        elif stage == "validation":
            history, target = u.items[:-2], split.validation[u.user_id]
        else:
            raise ValueError(f"unknown stage {stage!r}")
        cases.append(EvalCase(u.user_id, u.cohort,
                              InteractionSequence(str(u.user_id), history),
                              u.text[:len(history)], target))
    return cases


def rank_catalog(policy: KnowledgePolicy, case: EvalCase, catalog: Catalog,
                 k: int, beam: int | None = None) -> list[int]:
    """Trie-beam top-k catalog items for one user, best first."""
    sm = catalog_sid_matrix(catalog)
    enc, q0 = policy.decode_inputs([case.seq], [case.text], sm)
    if beam is None:
        beam = max(4 * k, 16)
    ranked = policy.backbone.generate_topk(enc, q0, catalog.trie(),
                                           catalog, k, beam)
    return [item for item, _ in ranked]


def evaluate_policy(policy: KnowledgePolicy, catalog: Catalog,
                    cases: list[EvalCase], variant: str, seed: int,
                    k_values=(5, 10)) -> EvalReport:
    per_user: list[tuple[str, dict]] = []
    kmax = max(k_values)
    for case in cases:
        ranked = rank_catalog(policy, case, catalog, kmax)
        metrics = {}
        for k in k_values:
            metrics[f"recall@{k}"] = recall_at_k(ranked, case.target, k)
            metrics[f"ndcg@{k}"] = ndcg_at_k(ranked, case.target, k)
        per_user.append((case.cohort, metrics))

    report = EvalReport(variant=variant, seed=seed)
    cohorts = sorted({c for c, _ in per_user})
    metric_names = [f"{m}@{k}" for k in k_values for m in ("recall", "ndcg")]
    for name in metric_names:
        groups = {"all": [m[name] for _, m in per_user]}
        for c in cohorts:
            groups[c] = [m[name] for co, m in per_user if co == c]
        for cohort, vals in groups.items():
            report.rows.append({"variant": variant, "metric": name,
                                "value": float(np.mean(vals)),
                                "cohort": cohort, "seed": seed})
    return report


def write_report_csv(path: str, reports: list[EvalReport]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["variant", "metric", "value", "cohort", "seed"])
        writer.writeheader()
        for rep in reports:
            writer.writerows(rep.rows)


# ---------------------------------------------------------------------------
# harnesses


BETA_GRID = (0.1, 0.3, 0.5, 0.7)


def training_samples(world: SyntheticWorld, catalog: Catalog,
                     split: Split) -> list[TrainSample]:
    samples = []
    for u in world.users:
        if u.user_id not in split.train:
            continue
        items = split.train[u.user_id]
        if len(items) < 2:
            continue
        samples.append(TrainSample(
            seq=InteractionSequence(str(u.user_id), items[:-1]),
            text=u.text[:len(items) - 1],
            target_sid=catalog.sids[items[-1]].as_sequence()))
    return samples


def make_policy(rng: np.random.Generator, reference: GRBackbone,
                knowledge, variant: str, catalog: Catalog,
                k_codebooks: int = 4, codewords: int = 16,
                tau: float = 1.0) -> KnowledgePolicy:
    """Fresh policy warm-started from the reference backbone weights."""
    backbone = GRBackbone(rng, catalog.vocab_sizes, reference.cfg)
    backbone.load_state_arrays(reference.state_arrays())
    for p in backbone.parameters():
        p.requires_grad = True
    return KnowledgePolicy(rng, backbone, knowledge, variant=variant,
                           k_codebooks=k_codebooks, codewords=codewords,
                           tau=tau)


@dataclass
class AblationResult:
    reports: list[EvalReport]
    logs: dict[str, list[dict]]        # variant (or variant:beta) -> train log
    failures: dict[str, str] = field(default_factory=dict)

    def report(self, variant: str) -> EvalReport:
        for r in self.reports:
            if r.variant == variant:
                return r
        raise KeyError(variant)


def run_ablation(world: SyntheticWorld, catalog: Catalog,
                 reference: GRBackbone, knowledge,
                 base_config: TrainConfig, k_values=(5, 10),
                 beta_grid=BETA_GRID) -> AblationResult:
    """Train and evaluate every variant from the same seed and data."""
    split = leave_one_out_split(world)
    samples = training_samples(world, catalog, split)
    sm = catalog_sid_matrix(catalog)
    test_cases = eval_cases(world, split, "test")
    val_cases = eval_cases(world, split, "validation")
    result = AblationResult(reports=[], logs={})

    def run_one(variant: str, label: str, **cfg_overrides):
        cfg = TrainConfig(**{**vars(base_config), "variant": variant,
                             **cfg_overrides})
        rng = np.random.default_rng(base_config.seed)
        policy = make_policy(rng, reference, knowledge, variant, catalog)
        policy, log = train(cfg, policy, reference, samples, sm)
        result.logs[label] = log
        return policy

    for variant in ("lwgr", "w/o_cons", "w/o_fus", "w/o_pcb", "rq"):
        try:
            policy = run_one(variant, variant)
            result.reports.append(evaluate_policy(
                policy, catalog, test_cases, variant, base_config.seed,
                k_values))
        except Exception as e:  # variant failure recorded, run continues
            result.failures[variant] = f"{type(e).__name__}: {e}"

    # fixed-beta grid: pick the best beta on validation recall@5
    best = None
    for beta in beta_grid:
        label = f"fixed_beta:{beta}"
        try:
            policy = run_one("fixed_beta", label, beta=beta)
            val = evaluate_policy(policy, catalog, val_cases, label,
                                  base_config.seed, k_values)
            score = val.value(f"recall@{min(k_values)}")
            if best is None or score > best[0]:
                best = (score, beta, policy)
        except Exception as e:
            result.failures[label] = f"{type(e).__name__}: {e}"
    if best is not None:
        result.reports.append(evaluate_policy(
            best[2], catalog, test_cases, "fixed_beta", base_config.seed,
            k_values))
    elif "fixed_beta" not in result.failures:
        result.failures["fixed_beta"] = "all beta runs failed"
    return result


def sweep_k(world: SyntheticWorld, catalog: Catalog, reference: GRBackbone,
            knowledge, base_config: TrainConfig, k_grid=(1, 3, 5, 7, 9),
            k_values=(5, 10)) -> tuple[list[EvalReport], dict[int, list[dict]]]:
    """One full training run per codebook count, identical seeds."""
    if any(k < 1 for k in k_grid):
        raise ContractViolation("codebook counts must be >= 1")
    split = leave_one_out_split(world)
    samples = training_samples(world, catalog, split)
    sm = catalog_sid_matrix(catalog)
    cases = eval_cases(world, split, "test")
    reports, logs = [], {}
    for k in k_grid:
        cfg = TrainConfig(**vars(base_config))
        rng = np.random.default_rng(base_config.seed)
        policy = make_policy(rng, reference, knowledge, "lwgr", catalog,
                             k_codebooks=k)
        policy, log = train(cfg, policy, reference, samples, sm)
        logs[k] = log
        reports.append(evaluate_policy(policy, catalog, cases, f"K={k}",
                                       base_config.seed, k_values))
    return reports, logs


def build_reference(world: SyntheticWorld, catalog: Catalog,
                    rng: np.random.Generator, config=None,
                    steps: int = 150, lr: float = 3e-3) -> GRBackbone:
    """Train the no-knowledge reference backbone on the same data, then
    freeze it."""
    split = leave_one_out_split(world)
    samples = training_samples(world, catalog, split)
    backbone = GRBackbone(rng, catalog.vocab_sizes, config)
    pretrain_backbone(backbone, samples, catalog_sid_matrix(catalog), rng,
                      steps=steps, lr=lr)
    backbone.freeze()
    return backbone
