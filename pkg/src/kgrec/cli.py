"""Command-line pipeline: data generation through serving simulation.

Every verb reads a YAML config (plus dotted ``--set key=value``
overrides), writes its outputs into a run directory named by the config
hash and seed, and snapshots the resolved config there.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .backbone import BackboneConfig, GRBackbone, catalog_sid_matrix
from .checkpoint import restore, save_checkpoint
from .config import ConfigError, config_hash, load_config, write_snapshot
from .evaluation import (build_reference, eval_cases, evaluate_policy,
                         make_policy, run_ablation, sweep_k, training_samples,
                         write_report_csv)
from .knowledge import ToyLM, pretrain_toy_lm
from .serving import (CostModel, KnowledgeRepository, NearlinePipeline,
                      run_scenario, write_summary_csv, write_traces_jsonl,
                      write_workload_csv)
from .sid import (fit_catalog, load_catalog_npz, save_catalog_npz,
                  write_sid_map_csv)
from .trainer import (KnowledgePolicy, TrainConfig, full_loss_grad_check,
                      train, write_train_log_csv)
from .worldgen import (CohortSpec, WorldSpec, generate_world,
                       leave_one_out_split, read_world_jsonl,
                       write_world_jsonl)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_FAILURE = 4


class DependencyError(FileNotFoundError):
    pass


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _require(path: str | None, what: str) -> str:
    if path is None or not os.path.exists(path):
        raise DependencyError(f"missing {what}: expected at {path}")
    return path


def _run_dir(cfg: dict, verb: str, out: str | None) -> str:
    base = out or os.environ.get("KGREC_OUT", cfg["out_dir"])
    path = os.path.join(base, f"{verb}-{config_hash(cfg)}-s{cfg['seed']}")
    os.makedirs(path, exist_ok=True)
    write_snapshot(os.path.join(path, "config.yaml"), cfg)
    return path


def _world_spec(cfg: dict) -> WorldSpec:
    w = cfg["world"]
    return WorldSpec(
        cohorts=[CohortSpec(n, u, a) for n, u, a in w["cohorts"]],
        n_items=w["n_items"], n_topics=w["n_topics"], vocab=w["vocab"],
        tokens_per_item=w["tokens_per_item"], d_content=w["d_content"],
        min_interactions=w["min_interactions"],
        max_interactions=w["max_interactions"],
        content_noise=w["content_noise"],
        anti_concentration=w["anti_concentration"])


def _backbone_config(cfg: dict) -> BackboneConfig:
    b = cfg["backbone"]
    return BackboneConfig(d_model=b["d_model"], heads=b["heads"],
                          enc_layers=b["enc_layers"],
                          dec_layers=b["dec_layers"], d_ff=b["d_ff"],
                          t_max=b["t_max"])


def _load_world(args):
    return read_world_jsonl(_require(args.world, "world file"))


def _load_lm(cfg: dict, path: str) -> ToyLM:
    k = cfg["knowledge"]
    lm = ToyLM(np.random.default_rng(0), vocab=cfg["world"]["vocab"],
               d_llm=k["d_llm"], layers=k["layers"], heads=k["heads"],
               d_ff=k["d_ff"], t_max=k["t_max"])
    restore(lm, _require(path, "knowledge model checkpoint"))
    lm.freeze_base()
    return lm


def _load_reference(cfg: dict, catalog, path: str) -> GRBackbone:
    ref = GRBackbone(np.random.default_rng(0), catalog.vocab_sizes,
                     _backbone_config(cfg))
    restore(ref, _require(path, "reference checkpoint"))
    ref.freeze()
    return ref


def _load_policy(cfg: dict, catalog, lm: ToyLM,
                 path: str) -> KnowledgePolicy:
    rng = np.random.default_rng(cfg["seed"])
    backbone = GRBackbone(rng, catalog.vocab_sizes, _backbone_config(cfg))
    policy = KnowledgePolicy(rng, backbone, lm,
                             variant=cfg["train"]["variant"],
                             k_codebooks=cfg["instructions"]["k"],
                             codewords=cfg["instructions"]["codewords"],
                             tau=cfg["instructions"]["tau"],
                             fusion_mode=cfg["fusion"]["mode"],
                             fusion_heads=cfg["fusion"]["heads"])
    restore(policy, _require(path, "policy checkpoint"))
    return policy


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=t["steps"], batch_size=t["batch_size"],
                       seed=cfg["seed"], eta_theta=t["eta_theta"],
                       eta_lambda=t["eta_lambda"], lambda0=t["lambda0"],
                       delta=t["delta"], eps=t["eps"], beta=t["beta"],
                       variant=t["variant"], strategy=t["strategy"],
                       optimizer=t["optimizer"], clip_norm=t["clip_norm"])


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(cfg, args):
    world = generate_world(_world_spec(cfg), cfg["seed"])
    run = _run_dir(cfg, "gen-data", args.out)
    write_world_jsonl(world, os.path.join(run, "world.jsonl"))
    print(run)


def cmd_fit_sids(cfg, args):
    world = _load_world(args)
    run = _run_dir(cfg, "fit-sids", args.out)
    ids = [f"item-{i}" for i in range(world.spec.n_items)]
    text = [[int(world.item_topics[i])] * 2 for i in range(world.spec.n_items)]
    catalog = fit_catalog(ids, world.item_content, text,
                          cfg["sid"]["levels"], cfg["sid"]["codewords"],
                          cfg["seed"])
    save_catalog_npz(os.path.join(run, "catalog.npz"), catalog)
    write_sid_map_csv(os.path.join(run, "sid_map.csv"), catalog)
    print(run)


def cmd_pretrain_lm(cfg, args):
    world = _load_world(args)
    run = _run_dir(cfg, "pretrain-lm", args.out)
    corpus = [tok for u in world.users for tok in u.text if tok]
    k = cfg["knowledge"]
    lm = ToyLM(np.random.default_rng(cfg["seed"]),
               vocab=world.spec.vocab, d_llm=k["d_llm"], layers=k["layers"],
               heads=k["heads"], d_ff=k["d_ff"], t_max=k["t_max"])
    lm, log = pretrain_toy_lm(corpus, np.random.default_rng(cfg["seed"]),
                              model=lm, epochs=k["pretrain_epochs"],
                              lr=k["lr"])
    save_checkpoint(os.path.join(run, "lm.npz"), lm,
                    meta={"loss_log": log})
    print(run)


def cmd_pretrain_reference(cfg, args):
    world = _load_world(args)
    catalog = load_catalog_npz(_require(args.catalog, "catalog file"))
    run = _run_dir(cfg, "pretrain-reference", args.out)
    ref = build_reference(world, catalog, np.random.default_rng(cfg["seed"]),
                          _backbone_config(cfg),
                          steps=cfg["train"]["reference_steps"],
                          lr=cfg["train"]["reference_lr"])
    save_checkpoint(os.path.join(run, "reference.npz"), ref, meta={})
    print(run)


def cmd_train(cfg, args):
    world = _load_world(args)
    catalog = load_catalog_npz(_require(args.catalog, "catalog file"))
    lm = _load_lm(cfg, args.lm)
    reference = _load_reference(cfg, catalog, args.reference)
    run = _run_dir(cfg, "train", args.out)
    if cfg["train"]["strategy"] == "lora":
        lm.add_adapters(np.random.default_rng(cfg["seed"]))
    policy = make_policy(np.random.default_rng(cfg["seed"]), reference, lm,
                         cfg["train"]["variant"], catalog,
                         k_codebooks=cfg["instructions"]["k"],
                         codewords=cfg["instructions"]["codewords"],
                         tau=cfg["instructions"]["tau"])
    split = leave_one_out_split(world)
    samples = training_samples(world, catalog, split)
    policy, log = train(_train_config(cfg), policy, reference, samples,
                        catalog_sid_matrix(catalog))
    save_checkpoint(os.path.join(run, "policy.npz"), policy,
                    meta={"variant": cfg["train"]["variant"]})
    write_train_log_csv(os.path.join(run, "train_log.csv"), log)
    print(run)


def cmd_eval(cfg, args):
    world = _load_world(args)
    catalog = load_catalog_npz(_require(args.catalog, "catalog file"))
    lm = _load_lm(cfg, args.lm)
    run = _run_dir(cfg, "eval", args.out)
    policy = _load_policy(cfg, catalog, lm, args.policy)
    cases = eval_cases(world, leave_one_out_split(world), "test")
    report = evaluate_policy(policy, catalog, cases,
                             cfg["train"]["variant"], cfg["seed"],
                             tuple(cfg["eval"]["k_values"]))
    write_report_csv(os.path.join(run, "metrics.csv"), [report])
    print(run)


def cmd_ablate(cfg, args):
    world = _load_world(args)
    catalog = load_catalog_npz(_require(args.catalog, "catalog file"))
    lm = _load_lm(cfg, args.lm)
    reference = _load_reference(cfg, catalog, args.reference)
    run = _run_dir(cfg, "ablate", args.out)
    result = run_ablation(world, catalog, reference, lm, _train_config(cfg),
                          tuple(cfg["eval"]["k_values"]),
                          tuple(cfg["train"]["beta_grid"]))
    write_report_csv(os.path.join(run, "ablation.csv"), result.reports)
    for label, log in result.logs.items():
        safe = label.replace("/", "_").replace(":", "_")
        write_train_log_csv(os.path.join(run, f"log_{safe}.csv"), log)
    if result.failures:
        with open(os.path.join(run, "failures.json"), "w") as f:
            json.dump(result.failures, f)
    print(run)


def cmd_sweep_k(cfg, args):
    world = _load_world(args)
    catalog = load_catalog_npz(_require(args.catalog, "catalog file"))
    lm = _load_lm(cfg, args.lm)
    reference = _load_reference(cfg, catalog, args.reference)
    run = _run_dir(cfg, "sweep-k", args.out)
    reports, logs = sweep_k(world, catalog, reference, lm,
                            _train_config(cfg),
                            tuple(cfg["sweep"]["k_grid"]),
                            tuple(cfg["eval"]["k_values"]))
    write_report_csv(os.path.join(run, "sweep_k.csv"), reports)
    for k, log in logs.items():
        write_train_log_csv(os.path.join(run, f"log_K{k}.csv"), log)
    print(run)


def cmd_serve_sim(cfg, args):
    world = _load_world(args)
    catalog = load_catalog_npz(_require(args.catalog, "catalog file"))
    lm = _load_lm(cfg, args.lm)
    policy = _load_policy(cfg, catalog, lm, args.policy)
    run = _run_dir(cfg, "serve-sim", args.out)
    s = cfg["serving"]
    contexts = {u.user_id: (u.items[:-1], u.text[:-1]) for u in world.users}
    rng = np.random.default_rng(cfg["seed"])
    uids = sorted(contexts)
    workload = sorted(
        (float(t), int(rng.choice(uids)))
        for t in rng.integers(0, int(s["horizon_ms"]), size=s["requests"]))
    costs = CostModel(lookup_ms=s["lookup_ms"], fusion_ms=s["fusion_ms"],
                      decode_ms_per_level=s["decode_ms_per_level"],
                      refresh_ms_per_user=s["refresh_ms_per_user"])
    pipeline = NearlinePipeline(policy, catalog)
    repo = KnowledgeRepository(pipeline.default_entry())
    traces, summary = run_scenario(workload, s["refresh_period_ms"], repo,
                                   policy, pipeline, contexts, catalog,
                                   k=s["k"], costs=costs)
    write_workload_csv(os.path.join(run, "workload.csv"), workload)
    write_traces_jsonl(os.path.join(run, "traces.jsonl"), traces)
    write_summary_csv(os.path.join(run, "summary.csv"), summary)
    print(run)


def cmd_grad_check(cfg, args):
    run = _run_dir(cfg, "grad-check", args.out)
    errs = [full_loss_grad_check(cfg["seed"] + i)
            for i in range(args.grad_seeds)]
    worst = max(errs)
    with open(os.path.join(run, "grad_check.json"), "w") as f:
        json.dump({"max_rel_err": worst, "per_seed": errs}, f)
    print(f"{run} max_rel_err={worst:.3e}")
    if worst >= 1e-4:
        raise RuntimeError(f"gradient check failed: {worst:.3e} >= 1e-4")


VERBS = {
    "gen-data": cmd_gen_data,
    "fit-sids": cmd_fit_sids,
    "pretrain-lm": cmd_pretrain_lm,
    "pretrain-reference": cmd_pretrain_reference,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-k": cmd_sweep_k,
    "serve-sim": cmd_serve_sim,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgrec",
        description="knowledge-conditioned generative recommender pipeline")
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    parser.add_argument("--out", help="base output directory "
                        "(default: $KGREC_OUT or config out_dir)")
    parser.add_argument("--world", help="world JSONL file")
    parser.add_argument("--catalog", help="catalog npz file")
    parser.add_argument("--lm", help="knowledge model checkpoint")
    parser.add_argument("--reference", help="reference checkpoint")
    parser.add_argument("--policy", help="policy checkpoint")
    parser.add_argument("--grad-seeds", type=int, default=20)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except (ConfigError, FileNotFoundError) as e:
        return _fail("config", str(e), EXIT_CONFIG)
    try:
        VERBS[args.verb](cfg, args)
    except DependencyError as e:
        return _fail("dependency", str(e), EXIT_DEPENDENCY)
    except Exception as e:
        return _fail("failure", f"{type(e).__name__}: {e}", EXIT_FAILURE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
