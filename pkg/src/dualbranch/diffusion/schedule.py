"""Linear-beta noise schedule and the forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Steps are numbered 1..T; step 0 stands for clean data with alpha_bar = 1."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("schedule needs T >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        # index 0 holds the clean-data convention
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "betas", np.concatenate([[0.0], betas]))
        object.__setattr__(self, "alpha_bar", abar)

    def beta(self, t):
        return self.betas[self._check(t)]

    def abar(self, t):
        return self.alpha_bar[self._check(t)]

    def _check(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise TypeError("timesteps must be integers")
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return t


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps; ``t`` is a scalar or one step per batch item."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    abar = np.asarray(schedule.abar(t), dtype=np.float64)
    if abar.ndim == 1:
        abar = abar.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
