"""Shared fixtures: a small world, catalog and model stack."""

import numpy as np

from kgrec.backbone import BackboneConfig, GRBackbone, InteractionSequence
from kgrec.knowledge import ToyLM
from kgrec.sid import fit_catalog
from kgrec.trainer import KnowledgePolicy, TrainSample
from kgrec.worldgen import (CohortSpec, WorldSpec, generate_world,
                            leave_one_out_split)

SMALL_SPEC = WorldSpec(
    cohorts=[CohortSpec("pos", 12, 1.0), CohortSpec("neg", 12, -1.0)],
    n_items=48, n_topics=4, vocab=64, tokens_per_item=4,
    d_content=8, min_interactions=6, max_interactions=9)


def small_world(seed=0, spec=None):
    return generate_world(spec or SMALL_SPEC, seed)


def small_catalog(world, levels=2, m=8, seed=0):
    ids = [f"item-{i}" for i in range(world.spec.n_items)]
    text = [[int(t) for t in row] for row in
            np.arange(world.spec.n_items * 2).reshape(-1, 2) % world.spec.vocab]
    return fit_catalog(ids, world.item_content, text, levels, m, seed)


def world_samples(world, catalog) -> list[TrainSample]:
    """One training sample per user from the leave-one-out train split."""
    split = leave_one_out_split(world)
    samples = []
    for uid, items in split.train.items():
        user = world.users[uid]
        seq = InteractionSequence(str(uid), items[:-1])
        target = catalog.sids[items[-1]].as_sequence()
        samples.append(TrainSample(seq=seq, text=user.text[:len(items) - 1],
                                   target_sid=target))
    return samples


def small_backbone(catalog, seed=0, d_model=32, heads=4):
    cfg = BackboneConfig(d_model=d_model, heads=heads, enc_layers=1,
                         dec_layers=1, d_ff=64, t_max=12)
    return GRBackbone(np.random.default_rng(seed), catalog.vocab_sizes, cfg)


def small_lm(world, seed=0, d_llm=32):
    return ToyLM(np.random.default_rng(seed), vocab=world.spec.vocab,
                 d_llm=d_llm, layers=1, heads=2, d_ff=64, t_max=32)


def small_policy(catalog, world, variant="lwgr", seed=0, fusion_mode="residual",
                 backbone=None, lm=None):
    backbone = backbone or small_backbone(catalog, seed=seed)
    lm = lm if lm is not None else small_lm(world, seed=seed + 1)
    if lm is not False:
        lm.freeze_base()
    return KnowledgePolicy(np.random.default_rng(seed + 2), backbone,
                           None if lm is False else lm, variant=variant,
                           k_codebooks=4, codewords=8, tau=1.0,
                           fusion_mode=fusion_mode)
