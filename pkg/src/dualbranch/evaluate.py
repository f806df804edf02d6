"""Conditioning efficacy: do samples follow their own scene better than someone else's?"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .diffusion.model import DualBranchModel, ItemCondition
from .diffusion.sample import SamplerConfig, sample
from .ors import SamplingPlan
from .scene.raster import rasterize_reference
from .scene.types import OccupancyGrid, Scene


@dataclass
class PairResult:
    matched_mae: np.ndarray  # (n,)
    shuffled_mae: np.ndarray
    matched: np.ndarray  # (n, 3, V, U) samples
    shuffled: np.ndarray
    references: np.ndarray  # (n, V, U, 3) in [0, 1]

    @property
    def wins(self) -> int:
        return int(np.sum(self.matched_mae < self.shuffled_mae))

    @property
    def win_rate(self) -> float:
        return self.wins / len(self.matched_mae)


def mae(sample_img: np.ndarray, reference01: np.ndarray) -> float:
    """Per-pixel mean absolute error between a (3, V, U) sample in [-1, 1] and a (V, U, 3) image in [0, 1]."""
    return float(np.mean(np.abs((sample_img.transpose(1, 2, 0) + 1.0) / 2.0 - reference01)))


def condition_pairs(
    model: DualBranchModel,
    scenes: Sequence[Scene],
    plan_for: Callable[[OccupancyGrid], SamplingPlan],
    sampler: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    cam_index: int = 0,
    batch: int = 8,
) -> PairResult:
    """Sample every scene twice from the same noise: once with its own
    conditions and once with the next scene's (a cyclic shift, so no scene
    keeps its own). Both are scored against the first scene's reference.
    """
    n = len(scenes)
    if n < 2:
        raise ValueError("need at least two scenes to shuffle conditions")
    items = [ItemCondition.from_scene(s, cam_index, plan_for(s.grid)) for s in scenes]
    shifted = items[1:] + items[:1]
    refs = np.stack([rasterize_reference(s, cam_index) for s in scenes])
    matched, shuffled = [], []
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        chunk_seed = seed + lo
        matched.append(sample(model, items[lo:hi], sampler, seed=chunk_seed))
        shuffled.append(sample(model, shifted[lo:hi], sampler, seed=chunk_seed))
    matched_arr = np.concatenate(matched)
    shuffled_arr = np.concatenate(shuffled)
    m = np.array([mae(matched_arr[i], refs[i]) for i in range(n)])
    s = np.array([mae(shuffled_arr[i], refs[i]) for i in range(n)])
    return PairResult(m, s, matched_arr, shuffled_arr, refs)


def comparison_rows(result: PairResult, count: int = 6) -> List[dict]:
    return [
        {"reference": result.references[i], "matched": result.matched[i], "shuffled": result.shuffled[i]}
        for i in range(min(count, len(result.matched_mae)))
    ]
