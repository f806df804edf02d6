import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualbranch.autodiff import Adam, AdamConfig, ShapeError, Tensor, backward, default_dtype, ops
from dualbranch.diffusion import (
    DualBranchModel,
    ItemCondition,
    ModelSpec,
    NoiseSchedule,
    SamplerConfig,
    Trainer,
    TrainConfig,
    UNet,
    UNetSpec,
    VisualTokens,
    build_examples,
    ddim_timesteps,
    guide,
    load_checkpoint,
    parameter_digest,
    q_sample,
    sample,
    set_phase,
    train_step,
)
from dualbranch.diffusion.train import read_metrics, smoothed, truncate_metrics, trainable
from dualbranch.encoders import TokenSeq, build_env
from dualbranch.ors import SamplingPlan
from dualbranch.scene import generate_scene

TINY = ModelSpec(
    unet=UNetSpec(base_channels=4, time_width=16, cond_width=16, attn_width=8),
    visual_width=4,
    ors_class_dim=2,
    ors_samples=8,
    category_dim=4,
)


def _model(seed=0, spec=TINY):
    return DualBranchModel(np.random.default_rng(seed), spec)


@pytest.fixture(scope="module")
def examples(small_cfg):
    scenes = [generate_scene(s, small_cfg) for s in range(3)]
    return build_examples(scenes, SamplingPlan.for_grid(scenes[0].grid, TINY.ors_samples))


def _z(examples, n=2, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n,) + examples[0].image.shape))


# --- schedule ---------------------------------------------------------------------------


def test_schedule_invariants():
    s = NoiseSchedule()
    b = s.betas[1:]
    assert np.all((b > 0) & (b < 1)) and np.all(np.diff(b) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.abar(0) == 1.0 and s.abar(1000) < 0.01
    np.testing.assert_allclose(np.sqrt(s.alpha_bar) ** 2 + (1 - s.alpha_bar), 1.0, atol=1e-15)


def test_q_sample_clean_endpoint_and_first_step():
    s = NoiseSchedule()
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4))
    np.testing.assert_array_equal(q_sample(z0, 0, eps, s), z0)
    np.testing.assert_allclose(q_sample(z0, 1, eps, s), np.sqrt(0.9999) * z0 + np.sqrt(0.0001) * eps, atol=1e-15)


def test_q_sample_per_item_steps():
    s = NoiseSchedule()
    z0 = np.ones((2, 1, 2, 2))
    out = q_sample(z0, np.array([1, 1000]), np.zeros_like(z0), s)
    np.testing.assert_allclose(out[:, 0, 0, 0], np.sqrt([s.abar(1), s.abar(1000)]))


def test_q_sample_moments_small():
    s = NoiseSchedule()
    n = 20000
    rng = np.random.default_rng(1)
    draws = q_sample(np.full(n, 0.7), 300, rng.standard_normal(n), s)
    abar = s.abar(300)
    se = np.sqrt((1 - abar) / n)
    assert abs(draws.mean() - np.sqrt(abar) * 0.7) < 3 * se
    assert abs(draws.var() - (1 - abar)) < 3 * (1 - abar) * np.sqrt(2 / n)


def test_schedule_rejects_bad_steps():
    s = NoiseSchedule()
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 1001, np.zeros(2), s)
    with pytest.raises(ValueError):
        s.abar(-1)
    with pytest.raises(TypeError):
        s.abar(2.5)
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.03, beta_end=0.02)


# --- UNet -------------------------------------------------------------------------------


@pytest.mark.parametrize("size", [16, 24, 32])
def test_unet_restores_shape(size):
    net = UNet(np.random.default_rng(0), TINY.unet)
    z = Tensor(np.random.default_rng(1).standard_normal((2, 3, size, size)))
    ctx = Tensor(np.zeros((1, TINY.unet.cond_width)))
    assert net(z, np.array([5, 900]), ctx).shape == z.shape


def test_zero_residuals_are_identity():
    net = UNet(np.random.default_rng(0), TINY.unet)
    z = Tensor(np.random.default_rng(1).standard_normal((1, 3, 16, 16)))
    ctx = Tensor(np.random.default_rng(2).standard_normal((3, TINY.unet.cond_width)))
    ref = net(z, [40], ctx).data
    zeros = [Tensor(np.zeros((1, c, 16 >> i, 16 >> i))) for i, c in enumerate(TINY.unet.tap_channels[:2])]
    zeros.append(Tensor(np.zeros((1, TINY.unet.tap_channels[2], 4, 4))))
    np.testing.assert_array_equal(net(z, [40], ctx, zeros).data, ref)


def test_residual_shape_mismatch_rejected():
    net = UNet(np.random.default_rng(0), TINY.unet)
    z = Tensor(np.zeros((1, 3, 16, 16)))
    ctx = Tensor(np.zeros((1, TINY.unet.cond_width)))
    bad = [None, Tensor(np.zeros((1, 8, 4, 4))), None]
    with pytest.raises(ShapeError):
        net(z, [1], ctx, bad)
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 3, 18, 18))), [1], ctx)


def test_unet_gradients_match_finite_differences():
    with default_dtype(np.float64):
        net = UNet(np.random.default_rng(3), UNetSpec(base_channels=2, time_width=8, cond_width=6, attn_width=4))
        rng = np.random.default_rng(4)
        z = Tensor(rng.standard_normal((2, 3, 8, 8)))
        ctx = [Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((2, 6)))]
        probe = rng.standard_normal((2, 3, 8, 8))

        def loss():
            return ops.sum(ops.mul(net(z, np.array([3, 700]), ctx), probe))

        from dualbranch.autodiff.gradcheck import check_gradients, worst

        names, params = zip(*net.named_parameters())
        results = check_gradients(loss, params, names=names, entries=2)
        assert worst(results) < 1e-4, [(r.name, r.max_rel_error) for r in results if r.max_rel_error >= 1e-4]


# --- branches ---------------------------------------------------------------------------


def test_branch_residuals_zero_at_init(examples):
    model = _model()
    res = model.residuals(_z(examples), np.array([10, 500]), [ex.condition for ex in examples[:2]])
    assert len(res) == 3
    for r in res:
        assert np.all(r.data == 0.0)


def test_conditioned_equals_base_at_init(examples):
    model = _model()
    z = _z(examples)
    t = np.array([10, 500])
    cond = model.eps(z, t, [ex.condition for ex in examples[:2]]).data
    np.testing.assert_array_equal(cond, model.base_eps(z, t).data)


def test_one_step_makes_residuals_nonzero(examples):
    model = _model()
    set_phase(model, "branch_train")
    opt = Adam(trainable(model), AdamConfig(lr=1e-3))
    cfg = TrainConfig(phase="branch_train", p_drop=0.0, batch_size=2)
    result = train_step(model, opt, NoiseSchedule(), examples[:2], cfg, np.random.default_rng(0))
    assert result.applied
    res = model.residuals(_z(examples), np.array([10, 500]), [ex.condition for ex in examples[:2]])
    assert any(np.any(r.data != 0.0) for r in res)


def test_branch_rejects_wrong_provenance(examples):
    model = _model()
    item = examples[0].condition
    cam, text, boxes, polylines = model.tokens(item)
    fg = model.foreground.visual(item.ors_foreground, polylines, text)
    with pytest.raises(ValueError, match="foreground"):
        model.background.branch(_z(examples, 1), [5], [fg], [build_env(cam, text, boxes)], TINY.T)


def test_branch_rejects_wrong_spatial_kind(examples):
    model = _model()
    item = examples[0].condition
    cam, text, boxes, polylines = model.tokens(item)
    bg = model.background.visual(item.ors_background, boxes, text)
    with pytest.raises(ValueError, match="box"):
        model.background.branch(_z(examples, 1), [5], [bg], [build_env(cam, text, polylines)], TINY.T)


def test_branch_gradients_match_finite_differences():
    with default_dtype(np.float64):
        spec = ModelSpec(
            unet=UNetSpec(base_channels=2, time_width=8, cond_width=6, attn_width=4), visual_width=3, ors_samples=4
        )
        model = DualBranchModel(np.random.default_rng(5), spec)
        branch = model.background.branch
        rng = np.random.default_rng(6)
        for tap in branch.taps:
            tap.weight.assign(rng.standard_normal(tap.weight.shape) * 0.3)
            tap.bias.assign(rng.standard_normal(tap.bias.shape) * 0.3)
        visual = [VisualTokens(Tensor(rng.standard_normal((64, 3))), "background", (8, 8))]
        env = TokenSeq(Tensor(rng.standard_normal((4, 6))), ["cam", "text", "box", "box"])
        z = Tensor(rng.standard_normal((1, 3, 8, 8)))
        probes = [rng.standard_normal(s) for s in [(1, 2, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]]

        def loss():
            out = branch(z, [250], visual, [env], spec.T)
            return ops.add(ops.add(ops.sum(ops.mul(out[0], probes[0])), ops.sum(ops.mul(out[1], probes[1]))),
                           ops.sum(ops.mul(out[2], probes[2])))

        from dualbranch.autodiff.gradcheck import check_gradients, worst

        names, params = zip(*branch.named_parameters())
        results = check_gradients(loss, params, names=names, entries=2)
        assert worst(results) < 1e-4, [(r.name, r.max_rel_error) for r in results if r.max_rel_error >= 1e-4]


# --- training ---------------------------------------------------------------------------


def test_base_pretrain_is_vanilla_loss(examples):
    model = _model()
    set_phase(model, "base_pretrain")
    opt = Adam(trainable(model))
    schedule = NoiseSchedule()
    cfg = TrainConfig(phase="base_pretrain", use_fgm=False)
    batch = examples[:2]
    result = train_step(model, opt, schedule, batch, cfg, np.random.default_rng(9))

    rng = np.random.default_rng(9)
    t = rng.integers(1, schedule.T + 1, size=2)
    eps = rng.standard_normal((2,) + batch[0].image.shape)
    fresh = _model()
    zt = q_sample(np.stack([ex.image for ex in batch]), t, eps, schedule)
    pred = fresh.base_eps(Tensor(zt), t).data
    assert abs(result.loss - float(np.mean((pred.astype(np.float64) - eps) ** 2))) < 1e-5


def test_branch_train_keeps_base_frozen(examples):
    model = _model()
    before = parameter_digest(model.base_parameters())
    cond_before = parameter_digest(model.condition_parameters())
    trainer = Trainer(model, examples, TrainConfig(phase="branch_train", steps=100, batch_size=2, lr=1e-3))
    trainer.start_phase(None)
    trainer.run()
    assert parameter_digest(model.base_parameters()) == before
    assert parameter_digest(model.condition_parameters()) != cond_before


def test_non_finite_loss_aborts_step(examples):
    model = _model()
    set_phase(model, "base_pretrain")
    opt = Adam(trainable(model))
    bad = [examples[0].__class__(np.full_like(examples[0].image, np.nan), examples[0].mask, examples[0].condition)]
    before = parameter_digest(model.parameters())
    result = train_step(model, opt, NoiseSchedule(), bad, TrainConfig(), np.random.default_rng(0))
    assert not result.applied and not np.isfinite(result.loss)
    assert parameter_digest(model.parameters()) == before and opt.step_count == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(p_drop=1.0)
    with pytest.raises(ValueError):
        TrainConfig(phase="finetune")
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"phase": "joint", "warmup": 3})


def test_resume_matches_uninterrupted_run(examples, tmp_path):
    cfg = TrainConfig(phase="base_pretrain", steps=6, batch_size=2, lr=1e-3, seed=3)
    full = Trainer(_model(), examples, cfg)
    full.start_phase(None)
    full.run(log_path=tmp_path / "full.log")

    half = Trainer(_model(), examples, TrainConfig(**{**cfg.to_dict(), "steps": 3}))
    half.start_phase(None)
    half.run(log_path=tmp_path / "resumed.log", checkpoint_path=tmp_path / "ck.dckp")
    records, state = load_checkpoint(tmp_path / "ck.dckp")
    resumed = Trainer(_model(1), examples, cfg)
    resumed.restore(records, state)
    resumed.run(log_path=tmp_path / "resumed.log")

    assert parameter_digest(resumed.model.parameters()) == parameter_digest(full.model.parameters())
    assert (tmp_path / "resumed.log").read_text() == (tmp_path / "full.log").read_text()


def test_metrics_helpers(tmp_path):
    log = tmp_path / "m.log"
    log.write_text("".join(f"{i} {1.0 / i:.6f} 0.001 base_pretrain\n" for i in range(1, 6)))
    truncate_metrics(log, "base_pretrain", 3)
    assert [r[0] for r in read_metrics(log)] == [1, 2, 3]
    np.testing.assert_allclose(smoothed([1, 3, 5, 7], window=2), [1, 2, 4, 6])


# --- sampling ---------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 10))
def test_guidance_algebra(seed, scale):
    rng = np.random.default_rng(seed)
    u, c = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(guide(u, c, 0.0), u)
    np.testing.assert_array_equal(guide(u, c, 1.0), c)
    np.testing.assert_allclose(2 * guide(u, c, 0.5) - guide(u, c, 0.0), guide(u, c, 1.0), atol=1e-6)
    np.testing.assert_allclose(guide(u, c, scale), u + scale * (c - u), atol=1e-9)


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 20)
    assert ts[0] == 1000 and ts[-1] == 50 and len(ts) == 20 and np.all(np.diff(ts) < 0)


def test_zero_guidance_ignores_conditions(examples):
    model = _model()
    rng = np.random.default_rng(0)
    for p in model.condition_parameters():
        if p.trainable:
            p.assign(rng.standard_normal(p.shape) * 0.1)
    cfg = SamplerConfig(steps=3, guidance=0.0)
    a = sample(model, [examples[0].condition], cfg, seed=4)
    b = sample(model, [examples[3].condition], cfg, seed=4)
    np.testing.assert_array_equal(a, b)


def test_ddim_deterministic_and_zero_init_matches_base(examples):
    model = _model()
    items = [ex.condition for ex in examples[:2]]
    cfg = SamplerConfig(steps=4)
    a = sample(model, items, cfg, seed=11)
    b = sample(model, items, cfg, seed=11)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, sample(model, items, cfg, seed=11, base_only=True))
    assert a.shape == (2, 3, 16, 16) and np.all(np.abs(a) <= 1.0)


def test_ddpm_runs_on_short_schedule(examples):
    model = _model()
    out = sample(model, [examples[0].condition], SamplerConfig(kind="ddpm"), seed=2, schedule=NoiseSchedule(T=5))
    assert out.shape == (1, 3, 16, 16) and np.all(np.isfinite(out))


def test_null_condition_shape():
    item = ItemCondition.null((16, 12), 8)
    assert item.is_null and item.ors_background.shape == (12, 16, 8)


# --- conditioning evaluation ---------------------------------------------------------------


def test_condition_pairs_at_init_are_ties(small_cfg):
    from dualbranch.config import PlanConfig
    from dualbranch.evaluate import comparison_rows, condition_pairs, mae

    model = DualBranchModel(np.random.default_rng(0), TINY)
    scenes = [generate_scene(s, small_cfg) for s in range(3)]
    result = condition_pairs(model, scenes, PlanConfig(n=8).plan_for, SamplerConfig(steps=2), seed=4, batch=2)
    # zero-init branches ignore conditions, so both samples coincide and nobody wins
    np.testing.assert_array_equal(result.matched, result.shuffled)
    assert result.wins == 0 and result.win_rate == 0.0
    assert result.matched_mae[1] == mae(result.matched[1], result.references[1])
    assert len(comparison_rows(result, count=2)) == 2
