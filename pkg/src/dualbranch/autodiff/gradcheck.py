"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, default_dtype


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Optional[Sequence[str]] = None,
    step: float = 1e-5,
    entries: int = 4,
    directions: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> List[GradCheckResult]:
    """Compare backward() against central differences for each tensor in ``params``.

    For every tensor, ``entries`` randomly chosen scalars are perturbed on their
    own, and ``directions`` random unit directions over the whole tensor are
    probed so that every element contributes. Must be run at float64.
    """
    rng = rng or np.random.default_rng(0)
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    with default_dtype(np.float64):
        for p in params:
            if p.dtype != np.float64:
                raise TypeError("gradient checks require float64 tensors")
            p.grad = None
        loss = loss_fn()
        backward(loss)
        analytic = [None if p.grad is None else p.grad.copy() for p in params]

        def f() -> float:
            return loss_fn().item()

        results = []
        for name, p, g in zip(names, params, analytic):
            if g is None:
                g = np.zeros_like(p.data)
            worst = 0.0
            n = 0
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
            for idx in picks:
                orig = flat[idx]
                flat[idx] = orig + step
                fp = f()
                flat[idx] = orig - step
                fm = f()
                flat[idx] = orig
                worst = max(worst, rel_error(g.reshape(-1)[idx], (fp - fm) / (2 * step)))
                n += 1
            for _ in range(directions):
                d = rng.standard_normal(p.shape)
                d /= np.linalg.norm(d)
                orig = p.data.copy()
                p.data[...] = orig + step * d
                fp = f()
                p.data[...] = orig - step * d
                fm = f()
                p.data[...] = orig
                worst = max(worst, rel_error(float(np.sum(g * d)), (fp - fm) / (2 * step)))
                n += 1
            results.append(GradCheckResult(name, worst, n))
        return results


def worst(results: Iterable[GradCheckResult]) -> float:
    return max((r.max_rel_error for r in results), default=0.0)
