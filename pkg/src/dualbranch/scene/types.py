"""Semantic driving-scene types.

Frames: ego is x forward, y left, z up. Camera is x right, y down, z forward.
A camera maps ego points by ``p_cam = R @ p_ego + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

EMPTY, ROAD, BUILDING, VEGETATION, POLE, VEHICLE, PEDESTRIAN = range(7)
CLASS_NAMES = ("empty", "road", "building", "vegetation", "pole", "vehicle", "pedestrian")
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND = frozenset({VEHICLE, PEDESTRIAN})
BACKGROUND = frozenset({ROAD, BUILDING, VEGETATION, POLE})

MAP_CATEGORIES = ("crossing", "divider", "boundary")

# RGB in [0, 1]; index 0 is never drawn
PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.36, 0.36, 0.40],
        [0.78, 0.46, 0.34],
        [0.24, 0.62, 0.26],
        [0.92, 0.84, 0.20],
        [0.16, 0.34, 0.88],
        [0.92, 0.18, 0.30],
    ]
)
HORIZON_RGB = np.array([0.86, 0.90, 0.95])
ZENITH_RGB = np.array([0.34, 0.54, 0.90])


@dataclass(frozen=True)
class ClassTaxonomy:
    names: Tuple[str, ...] = CLASS_NAMES
    foreground: frozenset = FOREGROUND
    background: frozenset = BACKGROUND

    def __post_init__(self):
        ids = set(range(len(self.names)))
        if self.foreground & self.background:
            raise ValueError("foreground and background sets overlap")
        if 0 in self.foreground or 0 in self.background:
            raise ValueError("class 0 is reserved for empty")
        if self.foreground | self.background | {0} != ids:
            raise ValueError("taxonomy does not cover every class id")

    @property
    def num_classes(self) -> int:
        return len(self.names)


TAXONOMY = ClassTaxonomy()


@dataclass
class OccupancyGrid:
    """Label volume indexed ``labels[i, j, k]`` along ego x, y, z.

    The flat buffer order ``(i * W + j) * D + k`` is the C order of ``labels``.
    """

    labels: np.ndarray
    origin: np.ndarray
    voxel_size: float

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {self.labels.shape}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")

    @classmethod
    def empty(cls, dims, origin=(0.0, 0.0, 0.0), voxel_size: float = 1.0) -> "OccupancyGrid":
        return cls(np.zeros(tuple(dims), dtype=np.uint8), np.asarray(origin, dtype=float), float(voxel_size))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def validate(self, taxonomy: ClassTaxonomy = TAXONOMY) -> None:
        if self.labels.size and int(self.labels.max()) >= taxonomy.num_classes:
            raise ValueError(f"label {int(self.labels.max())} outside taxonomy of {taxonomy.num_classes} classes")

    def filtered(self, keep: Sequence[int]) -> "OccupancyGrid":
        """Copy with every label outside ``keep`` set to empty."""
        mask = np.isin(self.labels, np.fromiter(keep, dtype=np.uint8))
        return OccupancyGrid(np.where(mask, self.labels, 0).astype(np.uint8), self.origin.copy(), self.voxel_size)

    def voxel_center(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + (np.array([i, j, k], dtype=np.float64) + 0.5) * self.voxel_size


def _gray_signs() -> np.ndarray:
    out = []
    for i in range(8):
        g = i ^ (i >> 1)
        out.append([1.0 if g & 4 else -1.0, 1.0 if g & 2 else -1.0, 1.0 if g & 1 else -1.0])
    return np.array(out)


GRAY_SIGNS = _gray_signs()


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(pitch: float) -> np.ndarray:
    c, s = math.cos(pitch), math.sin(pitch)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class BoundingBox3D:
    """Eight corners ordered by the Gray code over (±x, ±y, ±z) sign patterns."""

    category: int
    corners: np.ndarray

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64)
        if self.corners.shape != (8, 3):
            raise ValueError(f"box needs 8x3 corners, got {self.corners.shape}")

    @classmethod
    def from_center(cls, category: int, center, size, yaw: float = 0.0) -> "BoundingBox3D":
        half = np.asarray(size, dtype=np.float64) / 2.0
        local = GRAY_SIGNS * half
        return cls(category, np.asarray(center, dtype=np.float64) + local @ rot_z(yaw).T)

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def axes(self) -> np.ndarray:
        """Unit edge directions (rows) recovered from the corner ordering."""
        c = self.corners
        # corner 0 is (-,-,-); 7 is (+,-,-); 3 is (-,+,-); 1 is (-,-,+)
        edges = np.stack([c[7] - c[0], c[3] - c[0], c[1] - c[0]])
        return edges

    def is_cuboid(self, tol: float = 1e-6) -> bool:
        e = self.axes()
        lengths = np.linalg.norm(e, axis=1)
        if np.any(lengths < tol):
            return False
        u = e / lengths[:, None]
        if np.max(np.abs(u @ u.T - np.eye(3))) > tol:
            return False
        expected = self.corners[0] + ((GRAY_SIGNS + 1.0) / 2.0) @ e
        return bool(np.max(np.abs(expected - self.corners)) <= tol)

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        e = self.axes()
        rel = np.atleast_2d(points) - self.corners[0]
        coords = rel @ e.T / np.sum(e * e, axis=1)
        return np.all((coords >= -tol) & (coords <= 1.0 + tol), axis=1)


@dataclass
class MapPolyline:
    category: str
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.category not in MAP_CATEGORIES:
            raise ValueError(f"unknown map category {self.category!r}")
        if self.points.shape != (8, 3):
            raise ValueError(f"map element needs 8x3 points, got {self.points.shape}")
        if np.any(np.all(np.diff(self.points, axis=0) == 0, axis=1)):
            raise ValueError("consecutive map points must be distinct")

    @property
    def category_id(self) -> int:
        return MAP_CATEGORIES.index(self.category)


AXES_EGO_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class Camera:
    """Pinhole camera; ``image_size`` is (U, V) = (width, height) in pixels."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @classmethod
    def looking(cls, position, yaw: float, pitch: float, image_size=(32, 32), fov_deg: float = 90.0) -> "Camera":
        """Camera at ``position`` heading ``yaw`` (about ego z), tilted down by ``pitch``."""
        U, V = image_size
        f = (U / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        K = np.array([[f, 0.0, U / 2.0], [0.0, f, V / 2.0], [0.0, 0.0, 1.0]])
        R = AXES_EGO_TO_CAM @ (rot_z(yaw) @ rot_y(pitch)).T
        t = -R @ np.asarray(position, dtype=np.float64)
        return cls(K, R, t, (U, V))

    @property
    def center(self) -> np.ndarray:
        """Camera position in the ego frame."""
        return -self.R.T @ self.t

    def validate(self) -> None:
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("K must be upper triangular with K[2,2] = 1")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(self.R) - 1.0) >= 1e-9:
            raise ValueError("R is not a proper rotation (det != 1)")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) >= 1e-9:
            raise ValueError("R is not orthonormal")
        if min(self.image_size) < 1:
            raise ValueError("image size must be positive")

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera depth for ego points (N, 3)."""
        pc = np.atleast_2d(points) @ self.R.T + self.t
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (pc @ self.K.T)[:, :2] / z[:, None]
        return uv, z


@dataclass
class Scene:
    grid: OccupancyGrid
    boxes: List[BoundingBox3D] = field(default_factory=list)
    map: List[MapPolyline] = field(default_factory=list)
    cameras: List[Camera] = field(default_factory=list)
    prompt: List[int] = field(default_factory=list)
    seed: int = 0
    taxonomy: ClassTaxonomy = TAXONOMY

    def validate(self) -> None:
        self.grid.validate(self.taxonomy)
        for b in self.boxes:
            if b.category not in self.taxonomy.foreground:
                raise ValueError(f"box category {b.category} is not a foreground class")
        for cam in self.cameras:
            cam.validate()

    def camera(self, index: int) -> Camera:
        if not 0 <= index < len(self.cameras):
            raise IndexError(f"camera index {index} out of range for {len(self.cameras)} cameras")
        return self.cameras[index]


def resample_polyline(points, count: int = 8) -> np.ndarray:
    """Arc-length uniform resampling to ``count`` points; endpoints kept exactly."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg.sum())
    if total == 0.0:
        raise ValueError("all polyline points are identical")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, count)
    out = np.empty((count, pts.shape[1]))
    for n, s in enumerate(targets):
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(max(i, 0), len(seg) - 1)
        while seg[i] == 0.0 and i < len(seg) - 1:
            i += 1
        f = 0.0 if seg[i] == 0.0 else (s - cum[i]) / seg[i]
        out[n] = pts[i] + f * (pts[i + 1] - pts[i])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out
