import numpy as np
import pytest

import kgrec.autodiff as ad
from kgrec.autodiff import NumericError, Tensor
from kgrec.backbone import catalog_sid_matrix
from kgrec.trainer import (ConfigurationError, DualState, TrainConfig,
                           TrainingDiverged, batch_constraint, dual_step,
                           embed_text_batch, fixed_beta_loss, lagrangian_loss,
                           margin_penalty, pretrain_backbone, primal_dual_toy,
                           primal_step, reference_scores, train,
                           write_train_log_csv)
from helpers import (small_backbone, small_catalog, small_lm, small_policy,
                     small_world, world_samples)


# -- scalar objective pieces ------------------------------------------------


def test_margin_penalty_cases():
    assert margin_penalty(-1.0, -0.9, 1e-4) == 0.0
    assert abs(margin_penalty(-0.9, -1.0, 1e-4) - 0.0999) < 1e-12
    assert margin_penalty(-0.5, -0.5, 0.3) == 0.0
    with pytest.raises(ConfigurationError):
        margin_penalty(0.0, 0.0, -1.0)


def test_batch_constraint_is_mean_of_margins():
    s_ref = np.array([-0.9, -1.0, -0.5])
    s_theta = Tensor(np.array([-1.0, -0.9, -0.5]))
    c = batch_constraint(s_ref, s_theta, 1e-4)
    per_sample = [margin_penalty(r, t, 1e-4)
                  for r, t in zip(s_ref, s_theta.data)]
    assert abs(float(c.data) - np.mean(per_sample)) < 1e-15


def test_lagrangian_loss_values():
    dual = DualState(lam=0.05, eps=1e-4)
    assert abs(lagrangian_loss(1.0, 0.2, dual) - 1.009995) < 1e-12
    assert lagrangian_loss(1.0, 1e-4, dual) == 1.0
    assert lagrangian_loss(2.5, 0.7, DualState(lam=0.0)) == pytest.approx(2.5)


def test_fixed_beta_loss_values():
    assert fixed_beta_loss(1.0, 0.5, 0.0, 1e-4) == 1.0
    assert fixed_beta_loss(1.0, 1e-5, 0.7, 1e-4) == 1.0
    assert abs(fixed_beta_loss(1.0, 0.2 + 1e-4, 0.5, 1e-4) - 1.1) < 1e-12


def test_dual_step_cases():
    d = DualState(lam=0.05, eta_lam=5e-4, eps=0.0)
    dual_step(d, 0.0)
    assert d.lam == 0.05
    dual_step(d, 0.2)
    assert abs(d.lam - 0.0501) < 1e-15
    d2 = DualState(lam=1e-4, eta_lam=5e-4, eps=0.0)
    dual_step(d2, -1.0)
    assert d2.lam == 0.0


def test_dual_state_rejects_negative_fields():
    with pytest.raises(ConfigurationError):
        DualState(lam=-0.1)


def test_primal_step_descends_and_reports_norm():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([2.0])
    norm = primal_step([p], 0.5, clip_norm=10.0)
    assert p.data[0] == 2.0
    assert norm == 2.0


def test_primal_step_clips():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.full(4, 10.0)
    primal_step([p], 1.0, clip_norm=1.0)
    assert abs(np.linalg.norm(p.data) - 1.0) < 1e-12


def test_primal_step_rejects_nonfinite():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError):
        primal_step([p], 0.1)


# -- toy saddle problems ----------------------------------------------------


def test_toy_binding_constraint_reaches_kkt_point():
    x, lam, hist = primal_dual_toy(
        lambda x: 2 * x, lambda x: max(0.0, 1 - x),
        lambda x: -1.0 if x < 1 else 0.0, steps=10000)
    assert abs(x - 1.0) < 0.05
    assert abs(lam - 2.0) < 0.1
    assert all(l >= 0 for _, l in hist)


def test_toy_inactive_constraint_releases_multiplier():
    x, lam, _ = primal_dual_toy(
        lambda x: 2 * (x - 2), lambda x: max(0.0, 1 - x),
        lambda x: -1.0 if x < 1 else 0.0, steps=10000)
    assert abs(x - 2.0) < 0.05
    assert lam < 0.01


# -- policy model wiring ----------------------------------------------------


def stack(seed=0, variant="lwgr"):
    world = small_world(seed)
    catalog = small_catalog(world)
    policy = small_policy(catalog, world, variant=variant, seed=seed)
    samples = world_samples(world, catalog)
    return world, catalog, policy, samples


def test_embed_text_batch_matches_single_item_path():
    world = small_world()
    lm = small_lm(world)
    texts = [[[1, 2, 3], [4]], [[5, 6]]]
    emb, valid = embed_text_batch(lm, texts)
    assert emb.shape == (2, 2, lm.d_llm)
    assert np.array_equal(valid, [[1, 1], [1, 0]])
    single = lm.embed_item_text([1, 2, 3])
    assert np.allclose(emb.data[0, 0], single.data, atol=1e-12)


def test_policy_batch_scores_shapes_and_score_definition():
    _, catalog, policy, samples = stack()
    sm = catalog_sid_matrix(catalog)
    nll, s = policy.batch_scores(samples[:4], sm)
    assert nll.shape == (4,)
    assert np.allclose(s.data, -nll.data / policy.backbone.n_levels)


def test_residual_fusion_starts_as_reference_noop():
    world = small_world()
    catalog = small_catalog(world)
    backbone = small_backbone(catalog, seed=3)
    policy = small_policy(catalog, world, backbone=backbone, seed=3)
    samples = world_samples(world, catalog)[:4]
    sm = catalog_sid_matrix(catalog)
    with ad.no_grad():
        nll, s = policy.batch_scores(samples, sm)
    s_ref = reference_scores(backbone, samples, sm)
    assert np.allclose(s.data, s_ref, atol=1e-10)


def test_without_fusion_variant_extends_encoder_memory():
    world, catalog, policy, samples = stack(variant="w/o_fus")
    sm = catalog_sid_matrix(catalog)
    seqs = [s.seq for s in samples[:3]]
    texts = [s.text for s in samples[:3]]
    enc, q0 = policy.decode_inputs(seqs, texts, sm)
    plain = policy.backbone.encode(seqs, sm)
    assert enc.hidden.shape[1] > plain.hidden.shape[1]
    assert q0.ndim == 2  # start state untouched


def test_gradients_reach_instruction_and_fusion_modules():
    _, catalog, policy, samples = stack()
    # the output projection starts at zero (exact no-op), which also
    # blocks gradient flow into the knowledge path; perturb it first
    policy.fusion.attn.w_o.weight.data[:] = 0.1 * np.random.default_rng(
        0).normal(size=policy.fusion.attn.w_o.weight.shape)
    sm = catalog_sid_matrix(catalog)
    nll, _ = policy.batch_scores(samples[:4], sm)
    ad.backward(ad.mean(nll))
    proj_grads = [p.grad for p in policy.instruction.parameters()]
    assert any(g is not None and np.any(g != 0) for g in proj_grads)
    assert any(p.grad is not None and np.any(p.grad != 0)
               for p in policy.fusion.parameters())


def test_frozen_strategy_excludes_knowledge_base_weights():
    _, catalog, policy, _ = stack()
    trainable = {id(p) for p in policy.trainable_parameters()}
    for p in policy.knowledge.base_parameters():
        assert id(p) not in trainable


# -- training loop ----------------------------------------------------------


def short_config(**kw):
    defaults = dict(steps=5, batch_size=8, seed=0, eta_theta=1e-3,
                    variant="lwgr")
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_train_log_schema_and_lambda_nonnegative(tmp_path):
    world, catalog, policy, samples = stack()
    sm = catalog_sid_matrix(catalog)
    reference = small_backbone(catalog, seed=11)
    _, log = train(short_config(), policy, reference, samples, sm)
    assert len(log) == 5
    for row in log:
        assert set(row) == {"step", "loss_rec", "constraint", "lambda",
                            "loss_total", "grad_norm"}
        assert row["lambda"] >= 0
    path = tmp_path / "log.csv"
    write_train_log_csv(str(path), log)
    head = path.read_text().splitlines()[0]
    assert head == "step,loss_rec,constraint,lambda,loss_total,grad_norm"


def test_without_constraint_variant_keeps_lambda_zero():
    world, catalog, policy, samples = stack(variant="w/o_cons")
    sm = catalog_sid_matrix(catalog)
    reference = small_backbone(catalog, seed=11)
    _, log = train(short_config(variant="w/o_cons"), policy, reference,
                   samples, sm)
    assert all(row["lambda"] == 0.0 for row in log)


def test_reference_checksum_invariant_across_training():
    world, catalog, policy, samples = stack()
    sm = catalog_sid_matrix(catalog)
    reference = small_backbone(catalog, seed=11)
    before = reference.checksum()
    train(short_config(), policy, reference, samples, sm)
    assert reference.checksum() == before


def test_frozen_knowledge_checksum_invariant_across_training():
    world, catalog, policy, samples = stack()
    sm = catalog_sid_matrix(catalog)
    before = policy.knowledge.base_checksum()
    train(short_config(), policy, small_backbone(catalog, seed=11),
          samples, sm)
    assert policy.knowledge.base_checksum() == before


def test_training_determinism():
    def run():
        world, catalog, policy, samples = stack(seed=4)
        sm = catalog_sid_matrix(catalog)
        reference = small_backbone(catalog, seed=11)
        trained, log = train(short_config(seed=4), policy, reference,
                             samples, sm)
        return trained.checksum(), [r["loss_total"] for r in log]
    c1, l1 = run()
    c2, l2 = run()
    assert c1 == c2 and l1 == l2


def test_divergence_aborts_with_log():
    world, catalog, policy, samples = stack()
    sm = catalog_sid_matrix(catalog)
    reference = small_backbone(catalog, seed=11)
    with pytest.raises(TrainingDiverged) as exc:
        train(short_config(steps=40, eta_theta=2.0,
                           divergence_factor=1.5, clip_norm=1e9),
              policy, reference, samples, sm)
    assert len(exc.value.log) >= 1


def test_pretrain_backbone_reduces_loss():
    world = small_world(2)
    catalog = small_catalog(world)
    sm = catalog_sid_matrix(catalog)
    backbone = small_backbone(catalog, seed=2)
    samples = world_samples(world, catalog)
    log = pretrain_backbone(backbone, samples, sm,
                            np.random.default_rng(0), steps=40)
    assert np.mean(log[-5:]) < np.mean(log[:5])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(eta_theta=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(variant="nope")
    with pytest.raises(ConfigurationError):
        TrainConfig(strategy="nope")
