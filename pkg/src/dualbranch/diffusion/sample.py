"""DDIM and DDPM samplers with classifier-free guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor, no_grad
from .model import DualBranchModel, ItemCondition
from .schedule import NoiseSchedule

SAMPLERS = ("ddim", "ddpm")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 20
    eta: float = 0.0
    guidance: float = 2.0

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.kind!r}; expected one of {SAMPLERS}")
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def guide(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """(1 - s) * eps_uncond + s * eps_cond, i.e. eps_uncond + s * (eps_cond - eps_uncond)."""
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced steps from T; the last step jumps to clean data."""
    steps = min(steps, T)
    return np.unique(np.round(np.linspace(T, 0, steps + 1)[:-1]).astype(np.int64))[::-1]


class Denoiser:
    """Guided noise prediction for a fixed batch of conditions.

    ``base_only`` runs the branch-free base network for both guidance terms, so
    the guidance arithmetic is identical to the full model's.
    """

    def __init__(self, model: DualBranchModel, items: Sequence[ItemCondition], scale: float, base_only: bool = False):
        self.model = model
        self.items = list(items)
        U, V = items[0].ors_background.shape[1], items[0].ors_background.shape[0]
        self.null = [ItemCondition.null((U, V), items[0].ors_background.shape[2])] * len(items)
        self.scale = scale
        self.base_only = base_only

    def __call__(self, z: np.ndarray, t: int) -> np.ndarray:
        ts = np.full(z.shape[0], t, dtype=np.int64)
        zt = Tensor(z)
        with no_grad():
            if self.base_only:
                e = self.model.base_eps(zt, ts).data
                return guide(e, e, self.scale)
            eps_u = self.model.eps(zt, ts, self.null).data
            eps_c = self.model.eps(zt, ts, self.items).data
        return guide(eps_u, eps_c, self.scale)


def _x0(z, eps, abar):
    return np.clip((z - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar), -1.0, 1.0)


def ddim_loop(denoise, z: np.ndarray, schedule: NoiseSchedule, steps: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    ts = ddim_timesteps(schedule.T, steps)
    x0 = z
    for i, t in enumerate(ts):
        prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        a_t, a_prev = float(schedule.abar(int(t))), float(schedule.abar(prev))
        eps = denoise(z, int(t))
        x0 = _x0(z, eps, a_t)
        if prev == 0:
            break
        sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev))
        z = np.sqrt(a_prev) * x0 + np.sqrt(max(1.0 - a_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * rng.standard_normal(z.shape)
    return x0


def ddpm_loop(denoise, z: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    x0 = z
    for t in range(schedule.T, 0, -1):
        a_t, a_prev = float(schedule.abar(t)), float(schedule.abar(t - 1))
        beta = float(schedule.beta(t))
        eps = denoise(z, t)
        x0 = _x0(z, eps, a_t)
        if t == 1:
            break
        mean = (np.sqrt(a_prev) * beta / (1.0 - a_t)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t)) * z
        var = beta * (1.0 - a_prev) / (1.0 - a_t)
        z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
    return x0


def sample(
    model: DualBranchModel,
    items: Sequence[ItemCondition],
    cfg: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    schedule: Optional[NoiseSchedule] = None,
    base_only: bool = False,
) -> np.ndarray:
    """(B, 3, V, U) samples in [-1, 1], starting from seeded standard-normal noise."""
    schedule = schedule or NoiseSchedule(model.spec.T)
    rng = np.random.default_rng(seed)
    V, U = items[0].ors_background.shape[:2]
    z = rng.standard_normal((len(items), model.spec.unet.in_channels, V, U))
    denoise = Denoiser(model, items, cfg.guidance, base_only)
    if cfg.kind == "ddim":
        return ddim_loop(denoise, z, schedule, cfg.steps, cfg.eta, rng)
    return ddpm_loop(denoise, z, schedule, rng)
