"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines by conftest.

Criterion 8 trains the full toy model (two phases, several minutes to tens of
minutes on one CPU core) and leaves its loss curve, metrics log and a sample
comparison under ``artifacts/acceptance``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from dualbranch.autodiff import Tensor, default_dtype
from dualbranch.cli import main
from dualbranch.config import PlanConfig
from dualbranch.diffusion import (
    DualBranchModel,
    ItemCondition,
    ModelSpec,
    NoiseSchedule,
    SamplerConfig,
    Trainer,
    TrainConfig,
    build_examples,
    parameter_digest,
    q_sample,
    sample,
)
from dualbranch.diffusion.train import read_metrics, smoothed
from dualbranch.evaluate import comparison_rows, condition_pairs
from dualbranch.fgm import ProjectedBox, build_mask, masked_mse
from dualbranch.gradsuite import build_and_run, module_cases, op_cases
from dualbranch.oracles import naive_ors, random_ors_case
from dualbranch.ors import SamplingPlan, merge_features, render_ors
from dualbranch.scene import GeneratorConfig, generate_scene
from dualbranch.sfa import SfaBlock

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts" / "acceptance"


def test_criterion_1_ors_oracle_equivalence():
    rng = np.random.default_rng(101)
    filters = ("full", "foreground", "background")
    start = time.perf_counter()
    mismatches = []
    for i in range(100):
        scene, cam, plan = random_ors_case(rng)
        filt = filters[int(rng.integers(0, 3))]
        if not np.array_equal(render_ors(scene, cam, plan, filt).labels, naive_ors(scene, cam, plan, filt)):
            mismatches.append(i)
    elapsed = time.perf_counter() - start
    print(f"ors oracle: 100 cases, {len(mismatches)} mismatches, {elapsed:.1f}s")
    assert not mismatches
    assert elapsed < 60.0


def test_criterion_2_foreground_background_decomposition():
    seeds = np.random.default_rng(202).integers(0, 2**31, size=50)
    bad = []
    for seed in seeds:
        scene = generate_scene(int(seed))
        plan = SamplingPlan.for_grid(scene.grid, 32)
        for c in range(len(scene.cameras)):
            full = render_ors(scene, c, plan, "full").labels
            merged = merge_features(render_ors(scene, c, plan, "foreground"), render_ors(scene, c, plan, "background"))
            if not np.array_equal(merged, full):
                bad.append((int(seed), c))
    assert not bad


def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    ops_out = build_and_run(op_cases, 303, entries=6, directions=3)
    mods_out = build_and_run(module_cases, 304, entries=3, directions=2)
    elapsed = time.perf_counter() - start
    for o in ops_out + mods_out:
        print(f"  {o.name:22s} err={o.error:.2e} tol={o.tol:.0e} worst={o.worst_param}")
    assert not [o for o in ops_out + mods_out if not o.ok]
    assert {o.name for o in mods_out} == {"sfa", "encoders", "branch", "unet"}
    assert elapsed < 300.0


def test_criterion_4_gate_identity():
    rng = np.random.default_rng(404)
    block = SfaBlock(rng, 16, 64, 4)
    changed = 0
    for _ in range(1000):
        scale = 10.0 ** rng.uniform(-6, 6)
        v1 = Tensor(rng.standard_normal((int(rng.integers(1, 65)), 16)) * scale)
        sp = Tensor(rng.standard_normal((int(rng.integers(1, 12)), 64)) * 10.0 ** rng.uniform(-3, 3))
        changed += int(not np.array_equal(block.gated_ground(v1, sp).data, v1.data))
    assert changed == 0


@pytest.mark.parametrize("seed", [0, 17, 123456789])
def test_criterion_5_zero_init_equivalence(seed):
    model = DualBranchModel(np.random.default_rng(seed), ModelSpec())
    scene = generate_scene(seed)
    plan = SamplingPlan.for_grid(scene.grid, model.spec.ors_samples)
    items = [ItemCondition.from_scene(scene, c, plan) for c in range(len(scene.cameras))]
    cfg = SamplerConfig()
    full = sample(model, items, cfg, seed=seed)
    base = sample(model, items, cfg, seed=seed, base_only=True)
    assert np.array_equal(full, base)


def test_criterion_6_fgm_mask_laws():
    assert np.all(build_mask([], (16, 16)) == 1.0)
    assert np.all(build_mask([ProjectedBox(0, 0.0, 0.0, 16.0, 16.0)], (16, 16)) == 1.0)
    mask = build_mask([ProjectedBox(0, 5.0, 7.0, 9.0, 11.0)], (16, 16))
    assert np.all(mask[7:11, 5:9] == 1.9375)
    assert np.count_nonzero(mask == 1.9375) == 16 and np.count_nonzero(mask == 1.0) == 240
    with default_dtype(np.float64):
        rng = np.random.default_rng(606)
        true, pred = rng.standard_normal((4, 3, 16, 16)), rng.standard_normal((4, 3, 16, 16))
        loss = masked_mse(true, Tensor(pred), np.ones((16, 16))).item()
    assert abs(loss - float(np.mean((pred - true) ** 2))) < 1e-12


def test_criterion_7_schedule_statistics():
    schedule = NoiseSchedule()
    rng = np.random.default_rng(707)
    n = 100_000
    z0 = np.array([-0.9, 0.0, 0.6])
    for t in (1, 500, 1000):
        abar = float(schedule.abar(t))
        draws = q_sample(np.broadcast_to(z0, (n, 3)), t, rng.standard_normal((n, 3)), schedule)
        var = 1.0 - abar
        mean_se = np.sqrt(var / n)
        var_se = var * np.sqrt(2.0 / (n - 1))
        mean_z = np.abs(draws.mean(axis=0) - np.sqrt(abar) * z0) / mean_se
        var_z = np.abs(draws.var(axis=0, ddof=1) - var) / var_se
        print(f"t={t}: mean z-scores {np.round(mean_z, 2)}, variance z-scores {np.round(var_z, 2)}")
        assert np.all(mean_z < 3.0) and np.all(var_z < 3.0)


# --- end-to-end toy training ---------------------------------------------------------------

TOY_SCENES = 256
TOY_TEST_PAIRS = 32
PHASE1 = TrainConfig(phase="base_pretrain", steps=5000, batch_size=8, lr=5e-4, seed=1)
PHASE2 = TrainConfig(phase="branch_train", steps=2000, batch_size=4, lr=2e-3, seed=2)


@pytest.fixture(scope="module")
def toy_run():
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    gen = GeneratorConfig()
    scenes = [generate_scene(s, gen) for s in range(TOY_SCENES)]
    plan = PlanConfig(n=32)
    examples = build_examples(scenes, plan.plan_for(scenes[0].grid))
    model = DualBranchModel(np.random.default_rng(0), ModelSpec())
    log = ARTIFACTS / "metrics.log"
    log.write_text("")

    first = Trainer(model, examples, PHASE1)
    first.start_phase(None)
    first.run(log_path=log)
    base_digest = parameter_digest(model.base_parameters())

    second = Trainer(model, examples, PHASE2)
    second.start_phase(first.state())
    losses = second.run(log_path=log)
    assert parameter_digest(model.base_parameters()) == base_digest

    test_scenes = [generate_scene(100_000 + i, gen) for i in range(TOY_TEST_PAIRS)]
    pairs = condition_pairs(model, test_scenes, plan.plan_for, SamplerConfig(), seed=5)
    elapsed = time.perf_counter() - start

    from dualbranch.plotting import loss_curve, sample_grid

    loss_curve(read_metrics(log), ARTIFACTS / "loss_curve.png")
    sample_grid(comparison_rows(pairs), ARTIFACTS / "samples.png")
    head = float(np.mean(losses[:100]))
    tail = float(smoothed(losses, 100)[-1])
    summary = {
        "phase2_first100_mean": head,
        "phase2_final_smoothed": tail,
        "phase2_drop": 1.0 - tail / head,
        "pair_wins": pairs.wins,
        "pairs": TOY_TEST_PAIRS,
        "matched_mae_mean": float(pairs.matched_mae.mean()),
        "shuffled_mae_mean": float(pairs.shuffled_mae.mean()),
        "seconds": elapsed,
    }
    (ARTIFACTS / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def test_criterion_8_end_to_end_toy_training(toy_run):
    assert toy_run["phase2_drop"] >= 0.5, f"phase-2 smoothed loss fell by {toy_run['phase2_drop']:.1%}"
    assert toy_run["pair_wins"] >= 0.75 * TOY_TEST_PAIRS, f"matched beat shuffled on {toy_run['pair_wins']}/{TOY_TEST_PAIRS}"
    assert toy_run["seconds"] < 2 * 3600


# --- determinism ---------------------------------------------------------------------------

TINY_CONFIG = {
    "dataset": {"count": 3},
    "generator": {"cameras": 2, "image_size": [16, 16]},
    "sampling": {"n": 8},
    "model": {
        "unet": {"base_channels": 4, "time_width": 16, "cond_width": 16, "attn_width": 8},
        "visual_width": 4,
        "ors_samples": 8,
        "category_dim": 4,
    },
    "train": {"batch_size": 2, "steps": 4, "lr": 0.001},
    "sampler": {"kind": "ddim", "steps": 5, "eta": 0.0},
}


def _cli_run(root: Path, cfg_path: Path) -> dict:
    out = root / "out"
    base = ["--config", str(cfg_path), "--seed", "42", "--out", str(out)]
    assert main(base + ["gen"]) == 0
    scene = out / "scenes" / "scene_00001.json"
    for what in ("ors", "mask", "reference"):
        assert main(base + ["render", str(scene), "--what", what, "--camera", "1"]) == 0
    assert main(base + ["train"]) == 0
    assert main(base + ["train", "--phase", "branch_train", "--steps", "3"]) == 0
    assert main(base + ["sample", str(scene), "--camera", "1"]) == 0
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    first = _cli_run(tmp_path / "a", cfg_path)
    second = _cli_run(tmp_path / "b", cfg_path)
    assert set(first) == set(second)
    assert any(name.endswith("_sample.ppm") for name in first)
    assert any(name.endswith(".dors") for name in first)
    differing = [name for name in first if first[name] != second[name]]
    assert not differing
