"""Nearline knowledge refresh + online request serving on one simulated
clock: the online path never calls the knowledge model.

Run:  python3 demos/04_serving_simulation.py
"""

import numpy as np

from kgrec.backbone import BackboneConfig, GRBackbone
from kgrec.knowledge import ToyLM
from kgrec.serving import (KnowledgeRepository, NearlinePipeline,
                           run_scenario)
from kgrec.sid import fit_catalog
from kgrec.trainer import KnowledgePolicy
from kgrec.worldgen import CohortSpec, WorldSpec, generate_world

spec = WorldSpec(cohorts=[CohortSpec("demo", 24, 1.0)], n_items=48,
                 n_topics=4, vocab=64, tokens_per_item=4, d_content=8,
                 min_interactions=6, max_interactions=9)
world = generate_world(spec, seed=0)
ids = [f"item-{i}" for i in range(spec.n_items)]
text = [[int(t)] * 2 for t in world.item_topics]
catalog = fit_catalog(ids, world.item_content, text, levels=2, m=8, seed=0)

backbone = GRBackbone(np.random.default_rng(0), catalog.vocab_sizes,
                      BackboneConfig(d_model=16, heads=2, enc_layers=1,
                                     dec_layers=1, d_ff=32, t_max=12))
lm = ToyLM(np.random.default_rng(1), vocab=spec.vocab, d_llm=16, layers=1,
           heads=2, d_ff=32, t_max=48)
lm.freeze_base()
policy = KnowledgePolicy(np.random.default_rng(2), backbone, lm,
                         k_codebooks=2, codewords=8)

contexts = {u.user_id: (u.items[:-1], u.text[:-1]) for u in world.users}
rng = np.random.default_rng(3)
uids = sorted(contexts)
workload = sorted((float(t), int(rng.choice(uids)))
                  for t in rng.integers(0, 30_000, size=500))

pipeline = NearlinePipeline(policy, catalog)
repo = KnowledgeRepository(pipeline.default_entry())
traces, summary = run_scenario(workload, refresh_period_ms=1000.0,
                               repo=repo, policy=policy, pipeline=pipeline,
                               user_contexts=contexts, catalog=catalog,
                               k=5, beam=8)

print(f"served {summary.requests} requests over 30 simulated seconds")
print(f"  p50 / p99 modeled latency: {summary.p50_latency_ms:.2f} / "
      f"{summary.p99_latency_ms:.2f} ms")
print(f"  max knowledge staleness:   {summary.max_staleness_ms:.0f} ms "
      "(bounded by refresh period + batch duration)")
print(f"  cold-start rate:           {summary.cold_start_rate:.3f}")
print(f"  nearline refreshes:        {summary.refreshes}")
lm_calls = sum(t.llm_forward_count for t in traces)
print(f"  knowledge-model calls on the online path: {lm_calls}")
print(f"  example trace: {traces[0].to_json()}")
