"""Reference rasterizer producing ground-truth images.

Each pixel ray (same geometry as ORS) is marched from ``near`` in fixed steps
of a quarter voxel up to ``far``. The first sample landing in a non-empty
voxel colours the pixel with ``PALETTE[label] * clamp(1 - depth / far, 0.2, 1)``.
Rays that hit nothing get the sky gradient, blended by ray elevation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .types import HORIZON_RGB, PALETTE, ZENITH_RGB, Scene


@dataclass(frozen=True)
class MarchPlan:
    step: float
    near: float
    far: float

    @classmethod
    def for_scene(cls, scene: Scene) -> "MarchPlan":
        e = scene.grid.voxel_size
        return cls(step=e / 4.0, near=0.5 * e, far=scene.grid.diagonal)

    @property
    def count(self) -> int:
        return int(np.floor((self.far - self.near) / self.step)) + 1

    @property
    def depths(self) -> np.ndarray:
        return self.near + np.arange(self.count, dtype=np.float64) * self.step


def sky_color(dir_z):
    """Horizon-to-zenith blend; rays at or below the horizon get the horizon colour."""
    w = np.clip(np.asarray(dir_z, dtype=np.float64) / 0.5, 0.0, 1.0)[..., None]
    return HORIZON_RGB + (ZENITH_RGB - HORIZON_RGB) * w


def shade(label: int, depth: float, far: float) -> np.ndarray:
    factor = min(max(1.0 - depth / far, 0.2), 1.0)
    return PALETTE[label] * factor


def first_hits(scene: Scene, cam_index: int, plan: Optional[MarchPlan] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (label, depth, ray z-direction); label 0 and depth inf on a miss."""
    from ..ors import lookup_points, pixel_rays

    plan = plan or MarchPlan.for_scene(scene)
    camera = scene.camera(cam_index)
    centre, dirs = pixel_rays(camera)
    depths = plan.depths
    points = centre[None, None, None, :] + dirs[:, :, None, :] * depths[None, None, :, None]
    labels = lookup_points(scene.grid, points)
    hit = labels != 0
    any_hit = hit.any(axis=2)
    first = np.argmax(hit, axis=2)
    label = np.where(any_hit, np.take_along_axis(labels, first[..., None], axis=2)[..., 0], 0)
    depth = np.where(any_hit, depths[first], np.inf)
    return label, depth, dirs[..., 2]


def rasterize_reference(scene: Scene, cam_index: int, plan: Optional[MarchPlan] = None) -> np.ndarray:
    """(V, U, 3) float image in [0, 1]."""
    plan = plan or MarchPlan.for_scene(scene)
    label, depth, dir_z = first_hits(scene, cam_index, plan)
    factor = np.clip(1.0 - np.where(np.isfinite(depth), depth, 0.0) / plan.far, 0.2, 1.0)
    lit = PALETTE[label] * factor[..., None]
    return np.where((label != 0)[..., None], lit, sky_color(dir_z))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
