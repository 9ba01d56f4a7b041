"""Primal-dual constrained training, from a scalar toy problem up to the
full recommender objective with a frozen reference model.

Run:  python3 demos/02_constrained_training.py
"""

import numpy as np

from kgrec.backbone import catalog_sid_matrix
from kgrec.evaluation import build_reference, make_policy, training_samples
from kgrec.knowledge import ToyLM, pretrain_toy_lm
from kgrec.sid import fit_catalog
from kgrec.trainer import TrainConfig, primal_dual_toy, train
from kgrec.worldgen import (CohortSpec, WorldSpec, generate_world,
                            leave_one_out_split)

# --- scalar warm-up: min x^2 subject to x >= 1 ----------------------------
x, lam, _ = primal_dual_toy(f_grad=lambda x: 2 * x,
                            constraint=lambda x: max(0.0, 1 - x),
                            constraint_grad=lambda x: -1.0 if x < 1 else 0.0,
                            steps=10_000)
print(f"scalar problem: x -> {x:.3f} (optimum 1), lambda -> {lam:.3f} "
      "(KKT multiplier 2)")

# --- the real objective ---------------------------------------------------
spec = WorldSpec(cohorts=[CohortSpec("pos", 12, 1.0),
                          CohortSpec("neg", 12, -1.0)],
                 n_items=48, n_topics=4, vocab=64, tokens_per_item=4,
                 d_content=8, min_interactions=6, max_interactions=9)
world = generate_world(spec, seed=0)
ids = [f"item-{i}" for i in range(spec.n_items)]
text = [[int(t)] * 2 for t in world.item_topics]
catalog = fit_catalog(ids, world.item_content, text, levels=2, m=8, seed=0)

lm = ToyLM(np.random.default_rng(0), vocab=spec.vocab, d_llm=32, layers=1,
           heads=2, d_ff=64, t_max=48)
corpus = [tok for u in world.users for tok in u.text if tok]
lm, _ = pretrain_toy_lm(corpus, np.random.default_rng(0), model=lm, epochs=2)
lm.freeze_base()

reference = build_reference(world, catalog, np.random.default_rng(0),
                            steps=30)
policy = make_policy(np.random.default_rng(0), reference, lm, "lwgr",
                     catalog, k_codebooks=4, codewords=8)
samples = training_samples(world, catalog, leave_one_out_split(world))

config = TrainConfig(steps=80, seed=0, optimizer="adamw",
                     eta_theta=1e-3)
policy, log = train(config, policy, reference, samples,
                    catalog_sid_matrix(catalog))

print(f"\nconstrained run ({config.steps} steps, delta = eps = "
      f"{config.eps:g}):")
print(f"{'step':>5} {'rec loss':>10} {'C(theta)':>10} {'lambda':>8}")
for row in log[::10] + [log[-1]]:
    print(f"{row['step']:>5} {row['loss_rec']:>10.4f} "
          f"{row['constraint']:>10.2e} {row['lambda']:>8.4f}")
tail = np.mean([r["constraint"] for r in log[-20:]])
print(f"\nfinal 20-step mean degradation C: {tail:.2e} "
      f"(budget eps = {config.eps:g})")
