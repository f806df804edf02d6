"""Occupancy ray sampling.

A ray leaves the camera centre through each pixel centre ``(u + 0.5, v + 0.5)``;
equidistant depths along it are looked up in the label volume with a floor
(nearest-voxel) rule. The result is a per-pixel column of class ids.

The scalar path (``pixel_ray``/``sample_ray``/``query_grid``) and the
vectorised ``render_ors`` perform the same float operations in the same
order, so the two agree bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .autodiff import Module, Parameter, ops
from .autodiff.nn import Linear
from .autodiff.tensor import Tensor
from .scene.types import NUM_CLASSES, TAXONOMY, Camera, OccupancyGrid, Scene

FILTERS = ("full", "foreground", "background")


@dataclass(frozen=True)
class Ray:
    origin: Tuple[float, float, float]
    direction: Tuple[float, float, float]


@dataclass(frozen=True)
class SamplingPlan:
    n: int = 32
    near: float = 0.5
    far: float = 45.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"sampling plan needs N >= 2, got {self.n}")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @classmethod
    def for_grid(cls, grid: OccupancyGrid, n: int = 32) -> "SamplingPlan":
        return cls(n, 0.5 * grid.voxel_size, grid.diagonal)

    @property
    def spacing(self) -> float:
        return (self.far - self.near) / (self.n - 1)

    @property
    def depths(self) -> np.ndarray:
        return self.near + np.arange(self.n, dtype=np.float64) * self.spacing


@dataclass
class OrsFeature:
    """Class ids sampled along every pixel ray, stored as ``labels[v, u, k]``."""

    labels: np.ndarray
    plan: SamplingPlan
    camera_index: int = 0
    filter: str = "full"

    @property
    def size(self) -> Tuple[int, int]:
        """(U, V)."""
        return self.labels.shape[1], self.labels.shape[0]


def _back_project(camera: Camera, su, sv):
    K, R = camera.K, camera.R
    fx, s, cx, fy, cy = K[0, 0], K[0, 1], K[0, 2], K[1, 1], K[1, 2]
    y = (sv - cy) / fy
    x = (su - cx - s * y) / fx
    z = 1.0
    dx = R[0, 0] * x + R[1, 0] * y + R[2, 0] * z
    dy = R[0, 1] * x + R[1, 1] * y + R[2, 1] * z
    dz = R[0, 2] * x + R[1, 2] * y + R[2, 2] * z
    return dx, dy, dz


def _check_intrinsics(camera: Camera) -> None:
    K = camera.K
    if K[0, 0] == 0 or K[1, 1] == 0 or abs(np.linalg.det(K)) < 1e-300:
        raise np.linalg.LinAlgError("camera intrinsics are singular")


def pixel_ray(camera: Camera, pixel: Tuple[float, float]) -> Ray:
    """Unit ray through pixel ``(u, v)`` in ego coordinates, from the camera centre."""
    _check_intrinsics(camera)
    u, v = pixel
    dx, dy, dz = _back_project(camera, float(u) + 0.5, float(v) + 0.5)
    dx, dy, dz = float(dx), float(dy), float(dz)
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    c = camera.center
    return Ray((float(c[0]), float(c[1]), float(c[2])), (dx / n, dy / n, dz / n))


def pixel_rays(camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Camera centre and (V, U, 3) unit directions for every pixel."""
    _check_intrinsics(camera)
    U, V = camera.image_size
    su = (np.arange(U, dtype=np.float64) + 0.5)[None, :]
    sv = (np.arange(V, dtype=np.float64) + 0.5)[:, None]
    su, sv = np.broadcast_arrays(su, sv)
    dx, dy, dz = _back_project(camera, su, sv)
    n = np.sqrt(dx * dx + dy * dy + dz * dz)
    return camera.center, np.stack([dx / n, dy / n, dz / n], axis=-1)


def sample_ray(ray: Ray, plan: SamplingPlan) -> np.ndarray:
    """The N ego points ``origin + direction * depth``."""
    o = np.asarray(ray.origin)
    d = np.asarray(ray.direction)
    return o[None, :] + d[None, :] * plan.depths[:, None]


def query_grid(grid: OccupancyGrid, point) -> int:
    """Label of the voxel containing ``point``; 0 outside the grid."""
    e = grid.voxel_size
    idx = [math.floor((float(point[a]) - float(grid.origin[a])) / e) for a in range(3)]
    H, W, D = grid.dims
    if 0 <= idx[0] < H and 0 <= idx[1] < W and 0 <= idx[2] < D:
        return int(grid.labels[idx[0], idx[1], idx[2]])
    return 0


def _keep_set(filter: str) -> Optional[frozenset]:
    if filter == "full":
        return None
    if filter == "foreground":
        return TAXONOMY.foreground
    if filter == "background":
        return TAXONOMY.background
    raise ValueError(f"unknown ORS filter {filter!r}; expected one of {FILTERS}")


def lookup_points(grid: OccupancyGrid, points: np.ndarray) -> np.ndarray:
    """Vectorised ``query_grid`` over points of shape (..., 3)."""
    e = grid.voxel_size
    H, W, D = grid.dims
    out_shape = points.shape[:-1]
    idx = np.floor((points - grid.origin) / e)
    inside = (
        (idx[..., 0] >= 0) & (idx[..., 0] < H)
        & (idx[..., 1] >= 0) & (idx[..., 1] < W)
        & (idx[..., 2] >= 0) & (idx[..., 2] < D)
    )
    labels = np.zeros(out_shape, dtype=np.uint8)
    ii = idx[inside].astype(np.int64)
    labels[inside] = grid.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
    return labels


def render_ors(scene: Scene, cam_index: int, plan: Optional[SamplingPlan] = None, filter: str = "full") -> OrsFeature:
    camera = scene.camera(cam_index)
    camera.validate()
    plan = plan or SamplingPlan.for_grid(scene.grid)
    keep = _keep_set(filter)
    grid = scene.grid if keep is None else scene.grid.filtered(keep)
    centre, dirs = pixel_rays(camera)
    depths = plan.depths
    points = centre[None, None, None, :] + dirs[:, :, None, :] * depths[None, None, :, None]
    return OrsFeature(lookup_points(grid, points), plan, cam_index, filter)


def merge_features(a: OrsFeature, b: OrsFeature) -> np.ndarray:
    """Pointwise union of two disjointly filtered features."""
    if np.any((a.labels != 0) & (b.labels != 0)):
        raise ValueError("features overlap; they were not rendered from disjoint filters")
    return np.where(a.labels != 0, a.labels, b.labels)


# ----------------------------------------------------------------------------
# learned embedding of a label volume


class OrsEmbedding(Module):
    """Per-pixel: embed each of the N class ids, flatten along depth, project.

    The empty class row is pinned to zero so an all-empty column maps to the
    projection bias.
    """

    def __init__(self, rng: np.random.Generator, n_samples: int, class_dim: int, width: int, num_classes: int = NUM_CLASSES):
        self.table = Parameter(rng.standard_normal((num_classes, class_dim)) * 0.5)
        self.proj = Linear(rng, n_samples * class_dim, width)
        self._num_classes = num_classes
        mask = np.ones((num_classes, 1))
        mask[0] = 0.0
        self._row_mask = mask

    def __call__(self, labels: np.ndarray) -> Tensor:
        """(V, U, N) ids -> (V, U, width)."""
        labels = np.asarray(labels)
        if labels.size and int(labels.max()) >= self._num_classes:
            raise ValueError(f"class id {int(labels.max())} not in the embedding table")
        V, U, N = labels.shape
        table = ops.mul(self.table, self._row_mask)
        emb = ops.embedding_lookup(table, labels.astype(np.int64))  # V, U, N, C
        flat = ops.reshape(emb, (V, U, N * self.table.shape[1]))
        return self.proj(flat)


# ----------------------------------------------------------------------------
# file dumps


def write_dors(path: Union[str, Path], feature: OrsFeature) -> None:
    """Header b"DORS" | U | V | N (u32 LE), then u8 labels in (v, u, k) order."""
    U, V = feature.size
    N = feature.labels.shape[2]
    Path(path).write_bytes(b"DORS" + struct.pack("<III", U, V, N) + np.ascontiguousarray(feature.labels, dtype=np.uint8).tobytes())


def read_dors(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != b"DORS":
        raise ValueError("not a DORS file")
    U, V, N = struct.unpack_from("<III", blob, 4)
    data = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if data.size != U * V * N:
        raise ValueError("DORS payload size does not match header")
    return data.reshape(V, U, N).copy()


def depth_max_class(feature: OrsFeature) -> np.ndarray:
    """Largest class id met along each ray, as a (V, U) image."""
    return feature.labels.max(axis=2)


def visualize(feature: OrsFeature) -> np.ndarray:
    """8-bit grey image: per-pixel max class id scaled by 255 // (num_classes - 1)."""
    return (depth_max_class(feature).astype(np.int32) * (255 // (NUM_CLASSES - 1))).astype(np.uint8)
