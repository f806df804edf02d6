"""Verification harness: every oracle and identity check behind one registry.

Each check receives a :class:`Fixtures` bundle (so callers can inject a
deliberately broken component) and the verify settings, and returns a
:class:`CheckResult`. A failing check is a report entry, never an exception.
"""

from __future__ import annotations

import time
import traceback
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .autodiff import Tensor, default_dtype
from .config import VerifyConfig
from .diffusion.model import DualBranchModel, ItemCondition, ModelSpec
from .diffusion.sample import SamplerConfig, guide, sample
from .diffusion.schedule import NoiseSchedule, q_sample
from .diffusion.unet import UNetSpec
from .fgm import ProjectedBox, build_mask, masked_mse
from .gradsuite import build_and_run, module_cases, op_cases
from .oracles import naive_ors, random_ors_case
from .ors import SamplingPlan, merge_features, render_ors
from .scene.generator import generate_scene
from .sfa import SfaBlock

FILTERS = ("full", "foreground", "background")


def _default_sfa(rng: np.random.Generator) -> SfaBlock:
    return SfaBlock(rng, 16, 64, 4)


def _tiny_model(rng: np.random.Generator) -> DualBranchModel:
    spec = ModelSpec(unet=UNetSpec(base_channels=4, time_width=16, cond_width=16, attn_width=8), visual_width=4, ors_samples=8, category_dim=4)
    return DualBranchModel(rng, spec)


@dataclass
class Fixtures:
    """Component factories used by the checks; override one to inject a fault."""

    sfa_block: Callable[[np.random.Generator], SfaBlock] = _default_sfa
    model: Callable[[np.random.Generator], DualBranchModel] = _tiny_model
    seed: int = 0


@dataclass
class CheckResult:
    name: str
    ok: bool
    metric: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{self.name} {status} {self.metric:.6g}" + (f" {self.detail}" if self.detail else "")


Check = Callable[[Fixtures, VerifyConfig], CheckResult]
REGISTRY: Dict[str, Check] = {}


def register(name: str):
    def deco(fn: Check) -> Check:
        if name in REGISTRY:
            raise ValueError(f"check {name!r} registered twice")
        REGISTRY[name] = fn
        return fn

    return deco


# ----------------------------------------------------------------------------
# checks


@register("ors_oracle")
def check_ors_oracle(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Vectorised ORS against the per-point lookup oracle, bit for bit."""
    rng = np.random.default_rng(fx.seed)
    start = time.perf_counter()
    mismatched = 0
    for i in range(cfg.ors_cases):
        scene, cam, plan = random_ors_case(rng)
        filt = FILTERS[i % 3]
        if not np.array_equal(render_ors(scene, cam, plan, filt).labels, naive_ors(scene, cam, plan, filt)):
            mismatched += 1
    elapsed = time.perf_counter() - start
    return CheckResult("ors_oracle", mismatched == 0 and elapsed < 60.0, float(mismatched), f"cases={cfg.ors_cases} seconds={elapsed:.1f}")


@register("fg_bg_merge")
def check_merge(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Foreground and background features merge back into the full-grid feature."""
    bad = 0
    for i in range(cfg.merge_scenes):
        scene = generate_scene(fx.seed * 1000 + i)
        plan = SamplingPlan.for_grid(scene.grid, 32)
        for c in range(len(scene.cameras)):
            full = render_ors(scene, c, plan, "full").labels
            merged = merge_features(render_ors(scene, c, plan, "foreground"), render_ors(scene, c, plan, "background"))
            bad += int(not np.array_equal(full, merged))
    return CheckResult("fg_bg_merge", bad == 0, float(bad), f"scenes={cfg.merge_scenes}")


def _grad_result(name: str, outcomes) -> CheckResult:
    failing = [o for o in outcomes if not o.ok]
    worst = max(outcomes, key=lambda o: o.error / o.tol)
    detail = "worst=" + worst.name + ("." + worst.worst_param if worst.worst_param and not worst.worst_param.startswith("param") else "")
    if failing:
        detail += " failing=" + ",".join(o.name for o in failing)
    return CheckResult(name, not failing, float(worst.error), detail)


@register("grad_ops")
def check_grad_ops(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Every differentiable op against central differences at float64."""
    if not cfg.gradcheck:
        return CheckResult("grad_ops", True, 0.0, "skipped")
    return _grad_result("grad_ops", build_and_run(op_cases, fx.seed, entries=5, directions=2))


@register("grad_modules")
def check_grad_modules(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Every parameter of SFA, encoders, a branch and the UNet against central differences."""
    if not cfg.gradcheck:
        return CheckResult("grad_modules", True, 0.0, "skipped")
    return _grad_result("grad_modules", build_and_run(module_cases, fx.seed, entries=3, directions=1))


@register("gate_identity")
def check_gate_identity(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """A closed gate passes its input through unchanged, bit for bit."""
    rng = np.random.default_rng(fx.seed)
    block = fx.sfa_block(rng)
    d_cond = block.d_cond
    changed = 0
    for _ in range(cfg.gate_inputs):
        n = int(rng.integers(1, 33))
        scale = 10.0 ** rng.uniform(-3, 3)
        v1 = Tensor(rng.standard_normal((n, block.d_visual)) * scale)
        sp = Tensor(rng.standard_normal((int(rng.integers(1, 9)), d_cond)))
        changed += int(not np.array_equal(block.gated_ground(v1, sp).data, v1.data))
    return CheckResult("gate_identity", changed == 0, float(changed), f"inputs={cfg.gate_inputs}")


@register("sfa_init_identity")
def check_sfa_init(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """At initialisation the fusion stack reduces to its self-attention stage."""
    rng = np.random.default_rng(fx.seed + 1)
    block = fx.sfa_block(rng)
    d_cond = block.d_cond
    v = Tensor(rng.standard_normal((20, block.d_visual)))
    sp, text = Tensor(rng.standard_normal((3, d_cond))), Tensor(rng.standard_normal((5, d_cond)))
    diff = float(np.max(np.abs(block(v, sp, text).data - block.self_attend(v).data)))
    return CheckResult("sfa_init_identity", diff == 0.0, diff)


@register("zero_init_equivalence")
def check_zero_init(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """An untrained dual-branch model samples exactly like the branch-free base."""
    model = fx.model(np.random.default_rng(fx.seed))
    scene = generate_scene(fx.seed + 3)
    scene.cameras = [c.__class__(c.K * np.array([[0.5], [0.5], [1.0]]), c.R, c.t, (16, 16)) for c in scene.cameras]
    plan = SamplingPlan.for_grid(scene.grid, model.spec.ors_samples)
    items = [ItemCondition.from_scene(scene, c, plan) for c in range(len(scene.cameras))]
    cfg_s = SamplerConfig(steps=4)
    full = sample(model, items, cfg_s, seed=fx.seed)
    base = sample(model, items, cfg_s, seed=fx.seed, base_only=True)
    diff = float(np.max(np.abs(full - base)))
    return CheckResult("zero_init_equivalence", bool(np.array_equal(full, base)), diff)


@register("fgm_mask_laws")
def check_fgm(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Mask edge cases and the unit-mask reduction to plain MSE."""
    failures = []
    if not np.all(build_mask([], (16, 16)) == 1.0):
        failures.append("no_box")
    if not np.all(build_mask([ProjectedBox(0, 0, 0, 16, 16)], (16, 16)) == 1.0):
        failures.append("full_frame")
    m = build_mask([ProjectedBox(0, 4, 4, 8, 8)], (16, 16))
    if not (np.all(m[4:8, 4:8] == 1.9375) and np.count_nonzero(m != 1.0) == 16):
        failures.append("small_box")
    rng = np.random.default_rng(fx.seed)
    with default_dtype(np.float64):
        true, pred = rng.standard_normal((2, 3, 16, 16)), rng.standard_normal((2, 3, 16, 16))
        gap = abs(masked_mse(true, Tensor(pred), np.ones((16, 16))).item() - float(np.mean((pred - true) ** 2)))
    if gap >= 1e-12:
        failures.append("unit_mask_mse")
    return CheckResult("fgm_mask_laws", not failures, gap, ",".join(failures))


@register("schedule_moments")
def check_schedule(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Monte-Carlo mean and variance of the forward process within three standard errors."""
    schedule = NoiseSchedule()
    rng = np.random.default_rng(fx.seed)
    n = cfg.schedule_draws
    z0 = 0.8
    worst = 0.0
    for t in (1, 500, 1000):
        abar = float(schedule.abar(t))
        draws = q_sample(np.full(n, z0), t, rng.standard_normal(n), schedule)
        var = 1.0 - abar
        worst = max(worst, abs(draws.mean() - np.sqrt(abar) * z0) / np.sqrt(var / n))
        # standard error of the sample variance of a Gaussian
        worst = max(worst, abs(draws.var(ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1))))
    sane = bool(np.all(np.diff(schedule.betas[1:]) > 0) and np.all(np.diff(schedule.alpha_bar) < 0) and schedule.abar(schedule.T) < 0.01)
    return CheckResult("schedule_moments", sane and worst < 3.0, worst, "units=standard_errors")


@register("guidance_algebra")
def check_guidance(fx: Fixtures, cfg: VerifyConfig) -> CheckResult:
    """Guided noise is affine in the scale with exact endpoints."""
    rng = np.random.default_rng(fx.seed)
    u, c = rng.standard_normal((2, 3, 8, 8))
    exact = np.array_equal(guide(u, c, 0.0), u) and np.array_equal(guide(u, c, 1.0), c)
    gap = float(np.max(np.abs(2 * guide(u, c, 0.5) - guide(u, c, 0.0) - guide(u, c, 1.0))))
    return CheckResult("guidance_algebra", exact and gap < 1e-6, gap)


# ----------------------------------------------------------------------------


def run_checks(
    cfg: Optional[VerifyConfig] = None,
    fixtures: Optional[Fixtures] = None,
    names: Optional[List[str]] = None,
) -> List[CheckResult]:
    cfg = cfg or VerifyConfig()
    fixtures = fixtures or Fixtures()
    results = []
    for name in names or list(REGISTRY):
        try:
            results.append(REGISTRY[name](fixtures, cfg))
        except Exception as exc:  # a crashing check is a failed check
            tb = traceback.format_exception_only(type(exc), exc)[-1].strip().replace(" ", "_")
            results.append(CheckResult(name, False, float("nan"), f"error={tb}"))
    return results


def format_report(results: List[CheckResult]) -> str:
    return "".join(r.line() + "\n" for r in results)
