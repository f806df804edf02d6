"""Seeded procedural street scenes.

Layout along ego y (grid axis j), mirrored on both sides of the road::

    | buildings | poles/trees strip | sidewalk | lane | lane | sidewalk | strip | buildings |

The road runs along ego x through the ego vehicle at the grid centre.
Vehicles are axis-aligned 4x2x2 voxel cuboids in lane slots; every
foreground voxel is written from its own annotated box, so box coverage
is exact by construction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .types import (
    BUILDING,
    PEDESTRIAN,
    POLE,
    ROAD,
    VEGETATION,
    VEHICLE,
    BoundingBox3D,
    Camera,
    MapPolyline,
    OccupancyGrid,
    Scene,
    resample_polyline,
)

VOCAB = (
    "a", "street", "scene", "with", "and", "no",
    "one", "two", "three", "four", "five", "six", "seven", "eight",
    "car", "cars", "building", "buildings", "pedestrian", "pedestrians",
    "tree", "trees", "pole", "poles", "crossing", "divider",
)
NUMBER_WORDS = ("no", "one", "two", "three", "four", "five", "six", "seven", "eight")

VEHICLE_SIZE = (4, 2, 2)
SLOT = 5
EGO_CLEARANCE = 4


class InfeasibleSpecError(ValueError):
    """The generator config cannot be realised on the requested grid."""


@dataclass
class GeneratorConfig:
    dims: Tuple[int, int, int] = (32, 32, 8)
    voxel_size: float = 1.0
    vehicles: Tuple[int, int] = (1, 6)
    buildings: Tuple[int, int] = (2, 6)
    pedestrians: Tuple[int, int] = (0, 2)
    trees: Tuple[int, int] = (1, 4)
    poles: Tuple[int, int] = (1, 3)
    cameras: int = 3
    image_size: Tuple[int, int] = (32, 32)
    fov_deg: float = 90.0
    camera_height: float = 1.5
    pitch_deg: float = 8.0
    crossing_prob: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown generator keys: {unknown}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def road_half(self) -> int:
        return max(2, self.dims[1] // 8)

    def lane_slots(self) -> List[Tuple[int, int]]:
        """(i0, j0) voxel anchors of every vehicle slot."""
        H, W, _ = self.dims
        rh = self.road_half
        centre_i = H // 2
        lanes = [W // 2 - rh // 2 - 1, W // 2 + rh // 2 - 1] if rh >= 4 else [W // 2 - 1]
        slots = []
        for s in range(H // SLOT):
            i0 = s * SLOT
            if i0 + VEHICLE_SIZE[0] > H:
                continue
            if i0 < centre_i + EGO_CLEARANCE and i0 + VEHICLE_SIZE[0] > centre_i - EGO_CLEARANCE:
                continue
            slots.extend((i0, j0) for j0 in lanes)
        return slots

    def validate(self) -> None:
        H, W, D = self.dims
        if not all(1 <= n <= 64 for n in self.dims):
            raise InfeasibleSpecError(f"grid dims {self.dims} outside 1..64")
        if not self.voxel_size > 0:
            raise InfeasibleSpecError("voxel_size must be positive")
        for name, lo_hi, cap in (
            ("vehicles", self.vehicles, 8),
            ("buildings", self.buildings, 6),
            ("pedestrians", self.pedestrians, 8),
            ("trees", self.trees, 16),
            ("poles", self.poles, 16),
        ):
            lo, hi = lo_hi
            if not 0 <= lo <= hi <= cap:
                raise InfeasibleSpecError(f"{name} range {lo_hi} outside 0..{cap}")
        if not 1 <= self.cameras <= 6:
            raise InfeasibleSpecError(f"camera count {self.cameras} outside 1..6")
        rh = self.road_half
        if W < 2 * (rh + 3) + 2 or D < 4 or H < 6:
            raise InfeasibleSpecError(f"grid {self.dims} too small for a road scene (need W >= {2 * (rh + 3) + 2}, D >= 4, H >= 6)")
        cap = len(self.lane_slots())
        if self.vehicles[1] > cap:
            raise InfeasibleSpecError(f"{self.vehicles[1]} vehicles requested but the road has {cap} slots")
        if self.buildings[1] > 2 * (H // 6):
            raise InfeasibleSpecError(f"{self.buildings[1]} buildings exceed {2 * (H // 6)} frontage slots")
        if self.trees[1] + self.poles[1] > 2 * H:
            raise InfeasibleSpecError("too many trees and poles for the verge strips")
        if self.pedestrians[1] > 2 * H:
            raise InfeasibleSpecError("too many pedestrians for the sidewalks")


def _count(rng: np.random.Generator, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def generate_scene(seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W, D = cfg.dims
    e = float(cfg.voxel_size)
    origin = np.array([-H / 2.0 * e, -W / 2.0 * e, -e])
    labels = np.zeros((H, W, D), dtype=np.uint8)
    rh = cfg.road_half
    jc = W // 2

    # ground slab: road + sidewalks, grass beyond
    labels[:, :, 0] = VEGETATION
    labels[:, jc - rh - 2 : jc + rh + 2, 0] = ROAD

    sides = (-1, 1)

    def strip_j(side: int, offset: int) -> int:
        # offset 0 is the first column outside the road edge
        return jc + rh + offset if side > 0 else jc - rh - 1 - offset

    # buildings on frontage plots of 6 voxels
    n_build = _count(rng, cfg.buildings)
    plots = [(side, p) for side in sides for p in range(H // 6)]
    for idx in rng.permutation(len(plots))[:n_build]:
        side, p = plots[idx]
        length = int(rng.integers(3, 7))
        i0 = p * 6 + int(rng.integers(0, 6 - length + 1))
        depth_max = W // 2 - (rh + 3)
        depth = int(rng.integers(min(3, depth_max), depth_max + 1))
        height = int(rng.integers(3, D))
        j_near = strip_j(side, 3)
        j0, j1 = (j_near, j_near + depth) if side > 0 else (j_near - depth + 1, j_near + 1)
        labels[i0 : i0 + length, j0:j1, 1 : 1 + height] = BUILDING

    # verge strip: poles and trees at distinct cells
    n_poles, n_trees = _count(rng, cfg.poles), _count(rng, cfg.trees)
    cells = [(side, i) for side in sides for i in range(H)]
    order = rng.permutation(len(cells))
    for n, idx in enumerate(order[: n_poles + n_trees]):
        side, i = cells[idx]
        j = strip_j(side, 2)
        if n < n_poles:
            labels[i, j, 1 : 1 + int(rng.integers(4, D))] = POLE
        else:
            labels[i, j, 1 : 1 + int(rng.integers(1, min(4, D - 1) + 1))] = VEGETATION

    boxes: List[BoundingBox3D] = []

    def add_box(category: int, i0: int, j0: int, k0: int, size) -> None:
        li, lj, lk = size
        labels[i0 : i0 + li, j0 : j0 + lj, k0 : k0 + lk] = category
        lo = origin + np.array([i0, j0, k0], dtype=np.float64) * e
        hi = origin + np.array([i0 + li, j0 + lj, k0 + lk], dtype=np.float64) * e
        boxes.append(BoundingBox3D.from_center(category, (lo + hi) / 2.0, hi - lo))

    # pedestrians on sidewalk cells
    n_ped = _count(rng, cfg.pedestrians)
    walk = [(side, i, col) for side in sides for i in range(H) for col in (0, 1)]
    used_i = set()
    for idx in rng.permutation(len(walk)):
        if len([b for b in boxes if b.category == PEDESTRIAN]) >= n_ped:
            break
        side, i, col = walk[idx]
        if (side, i) in used_i:
            continue
        used_i.add((side, i))
        add_box(PEDESTRIAN, i, strip_j(side, col), 1, (1, 1, 2))

    # vehicles in lane slots
    n_veh = _count(rng, cfg.vehicles)
    slots = cfg.lane_slots()
    for idx in sorted(rng.permutation(len(slots))[:n_veh]):
        i0, j0 = slots[idx]
        add_box(VEHICLE, i0, j0, 1, VEHICLE_SIZE)

    # map elements on the road surface (z = top of the ground slab)
    z0 = origin[2] + e
    x_lo, x_hi = origin[0], origin[0] + H * e
    y_left = origin[1] + (jc + rh) * e
    y_right = origin[1] + (jc - rh) * e
    y_mid = origin[1] + jc * e

    def along(y: float) -> np.ndarray:
        xs = np.linspace(x_lo, x_hi, 5)
        return np.stack([xs, np.full(5, y), np.full(5, z0)], axis=1)

    polylines = [
        MapPolyline("boundary", resample_polyline(along(y_left))),
        MapPolyline("boundary", resample_polyline(along(y_right))),
        MapPolyline("divider", resample_polyline(along(y_mid))),
    ]
    has_crossing = bool(rng.random() < cfg.crossing_prob)
    if has_crossing:
        xc = origin[0] + (int(rng.integers(0, H)) + 0.5) * e
        pts = np.array([[xc, y_right, z0], [xc, y_mid, z0], [xc, y_left, z0]])
        polylines.append(MapPolyline("crossing", resample_polyline(pts)))

    cameras = []
    for c in range(cfg.cameras):
        yaw = 2.0 * math.pi * c / cfg.cameras + math.radians(float(rng.uniform(-10.0, 10.0)))
        pitch = math.radians(cfg.pitch_deg + float(rng.uniform(-3.0, 3.0)))
        pos = np.array([0.3 * math.cos(yaw), 0.3 * math.sin(yaw), cfg.camera_height])
        cameras.append(Camera.looking(pos, yaw, pitch, cfg.image_size, cfg.fov_deg))

    n_trees_total = n_trees
    prompt_words = ["a", "street", "scene", "with", NUMBER_WORDS[n_veh], "car" if n_veh == 1 else "cars"]
    prompt_words += ["and", NUMBER_WORDS[min(n_build, 8)], "building" if n_build == 1 else "buildings"]
    if n_ped:
        prompt_words += ["and", NUMBER_WORDS[n_ped], "pedestrian" if n_ped == 1 else "pedestrians"]
    if n_trees_total:
        prompt_words += ["and", "trees" if n_trees_total > 1 else "tree"]
    if has_crossing:
        prompt_words += ["and", "a", "crossing"]
    prompt = [VOCAB.index(w) for w in prompt_words]

    scene = Scene(
        grid=OccupancyGrid(labels, origin, e),
        boxes=boxes,
        map=polylines,
        cameras=cameras,
        prompt=prompt,
        seed=int(seed),
    )
    scene.validate()
    return scene
