"""Foreground-weighted denoising loss.

Boxes are projected to the image, reduced to clipped axis-aligned hulls at
latent resolution, and rasterised into a weight map that is 1 on background
and ``2 - area / (U * V)`` under a box, the smallest covering box winning.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .scene.io import write_pgm_ascii
from .scene.types import BoundingBox3D, Camera, Scene

Z_EPS = 1e-6


@dataclass(frozen=True)
class ProjectedBox:
    index: int
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    @property
    def area(self) -> float:
        return max(self.u_max - self.u_min, 0.0) * max(self.v_max - self.v_min, 0.0)


def project_box(box: BoundingBox3D, camera: Camera, latent_size: Tuple[int, int], index: int = 0) -> Optional[ProjectedBox]:
    """Clipped hull of the in-front corners, in latent pixels; None if nothing survives."""
    U, V = latent_size
    img_u, img_v = camera.image_size
    pc = box.corners @ camera.R.T + camera.t
    front = pc[pc[:, 2] > Z_EPS]
    if len(front) == 0:
        return None
    uvw = front @ camera.K.T
    u = uvw[:, 0] / uvw[:, 2] * (U / img_u)
    v = uvw[:, 1] / uvw[:, 2] * (V / img_v)
    u0, u1 = float(np.clip(u.min(), 0, U)), float(np.clip(u.max(), 0, U))
    v0, v1 = float(np.clip(v.min(), 0, V)), float(np.clip(v.max(), 0, V))
    if u1 <= u0 or v1 <= v0:
        return None
    return ProjectedBox(index, u0, v0, u1, v1)


def build_mask(projected: Sequence[ProjectedBox], latent_size: Tuple[int, int]) -> np.ndarray:
    """(V, U) weights; a pixel is covered when its centre lies in [min, max) on both axes."""
    U, V = latent_size
    total = float(U * V)
    min_area = np.full((V, U), np.inf)
    cu = np.arange(U) + 0.5
    cv = np.arange(V) + 0.5
    for pb in projected:
        cover = ((cv >= pb.v_min) & (cv < pb.v_max))[:, None] & ((cu >= pb.u_min) & (cu < pb.u_max))[None, :]
        np.minimum(min_area, np.where(cover, pb.area, np.inf), out=min_area)
    return np.where(np.isfinite(min_area), 2.0 - np.where(np.isfinite(min_area), min_area, 0.0) / total, 1.0)


def scene_mask(scene: Scene, cam_index: int, latent_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    camera = scene.camera(cam_index)
    size = latent_size or camera.image_size
    boxes = [project_box(b, camera, size, i) for i, b in enumerate(scene.boxes)]
    return build_mask([b for b in boxes if b is not None], size)


def masked_mse(eps_true, eps_pred: Tensor, mask) -> Tensor:
    """mean(mask * (eps_pred - eps_true)^2); the mask broadcasts over channels (and batch)."""
    true = np.asarray(eps_true.data if isinstance(eps_true, Tensor) else eps_true)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if true.shape != eps_pred.shape:
        raise ShapeError(f"masked_mse: eps shapes differ {true.shape} vs {eps_pred.shape}")
    if m.shape[-2:] != true.shape[-2:]:
        raise ShapeError(f"masked_mse: mask {m.shape} does not match spatial extent {true.shape[-2:]}")
    if true.ndim == 4 and m.ndim == 3:
        m = m[:, None]  # per-item masks (B, V, U) against (B, C, V, U)
    diff = ops.sub(eps_pred, true)
    return ops.mean(ops.mul(ops.mul(diff, diff), m))


def write_mask_pgm(path: Union[str, Path], mask: np.ndarray) -> None:
    """ASCII PGM of round(weight * 10000), maxval 20000."""
    write_pgm_ascii(path, np.round(np.asarray(mask) * 10000.0).astype(np.int64), 20000)


def write_mask_f32(path: Union[str, Path], mask: np.ndarray) -> None:
    """Row-major (v, u) little-endian float32 weights."""
    Path(path).write_bytes(np.ascontiguousarray(mask, dtype="<f4").tobytes())


def read_mask_f32(path: Union[str, Path], latent_size: Tuple[int, int]) -> np.ndarray:
    U, V = latent_size
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(V, U).astype(np.float64)
