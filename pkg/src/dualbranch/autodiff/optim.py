"""Adaptive-moment optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .nn import Parameter
from .tensor import NonFiniteError, is_checked


@dataclass
class AdamConfig:
    lr: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: Sequence[Parameter], config: AdamConfig = AdamConfig()):
        self.params: List[Parameter] = list(params)
        self.config = config
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        for p in self.params:
            if p.name in self.m:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)

    def step(self) -> None:
        """Apply one update to every trainable parameter that holds a gradient.

        In checked mode a non-finite gradient aborts the whole step before any
        parameter or moment is touched.
        """
        live = [p for p in self.params if p.trainable and p.grad is not None]
        if is_checked():
            for p in live:
                if not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"non-finite gradient for {p.name}")
        cfg = self.config
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1**self.step_count
        bc2 = 1.0 - cfg.beta2**self.step_count
        for p in live:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name][...] = state[f"adam.m.{name}"]
            self.v[name][...] = state[f"adam.v.{name}"]
        self.step_count = step_count
