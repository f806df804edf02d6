"""Slow, obviously-correct reference computations.

Nothing here shares code with the fast paths beyond ``pixel_ray`` (the
documented ray geometry) and ``query_grid`` (the scalar floor lookup).
"""

from __future__ import annotations

import math

import numpy as np

from .ors import SamplingPlan, pixel_ray, query_grid
from .scene.raster import MarchPlan, shade, sky_color
from .scene.types import TAXONOMY, Scene


def naive_ors(scene: Scene, cam_index: int, plan: SamplingPlan, filter: str = "full") -> np.ndarray:
    """Per-pixel, per-sample lookup in nested Python loops; returns (V, U, N)."""
    camera = scene.cameras[cam_index]
    U, V = camera.image_size
    keep = {"full": None, "foreground": TAXONOMY.foreground, "background": TAXONOMY.background}[filter]
    step = (plan.far - plan.near) / (plan.n - 1)
    out = np.zeros((V, U, plan.n), dtype=np.uint8)
    for v in range(V):
        for u in range(U):
            ray = pixel_ray(camera, (u, v))
            ox, oy, oz = ray.origin
            dx, dy, dz = ray.direction
            for k in range(plan.n):
                n = plan.near + k * step
                label = query_grid(scene.grid, (ox + dx * n, oy + dy * n, oz + dz * n))
                if keep is not None and label not in keep:
                    label = 0
                out[v, u, k] = label
    return out


def naive_raster(scene: Scene, cam_index: int, plan: MarchPlan = None) -> np.ndarray:
    """First-hit search at quarter-voxel steps, one pixel at a time; (V, U, 3)."""
    plan = plan or MarchPlan.for_scene(scene)
    camera = scene.cameras[cam_index]
    U, V = camera.image_size
    count = int(math.floor((plan.far - plan.near) / plan.step)) + 1
    img = np.zeros((V, U, 3))
    for v in range(V):
        for u in range(U):
            ray = pixel_ray(camera, (u, v))
            ox, oy, oz = ray.origin
            dx, dy, dz = ray.direction
            colour = None
            for k in range(count):
                n = plan.near + k * plan.step
                label = query_grid(scene.grid, (ox + dx * n, oy + dy * n, oz + dz * n))
                if label:
                    colour = shade(label, n, plan.far)
                    break
            img[v, u] = colour if colour is not None else sky_color(dz)
    return img


def random_ors_case(rng: np.random.Generator):
    """A random (scene, camera index, plan) triple with a small random camera."""
    from .scene.generator import GeneratorConfig, generate_scene
    from .scene.types import Camera

    cfg = GeneratorConfig(
        vehicles=(0, int(rng.integers(0, 7))),
        pedestrians=(0, int(rng.integers(0, 3))),
        cameras=1,
    )
    scene = generate_scene(int(rng.integers(0, 2**31)), cfg)
    size = (int(rng.integers(4, 17)), int(rng.integers(4, 17)))
    pos = rng.uniform([-18.0, -18.0, -2.0], [18.0, 18.0, 9.0])
    cam = Camera.looking(pos, float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(-0.6, 0.8)), size, float(rng.uniform(40.0, 120.0)))
    cam.K[0, 1] = float(rng.choice([0.0, rng.uniform(-0.5, 0.5)]))
    cam.K[0, 2] += float(rng.uniform(-2.0, 2.0))
    scene.cameras = [cam]
    near = float(rng.uniform(0.05, 3.0))
    plan = SamplingPlan(int(rng.integers(2, 41)), near, near + float(rng.uniform(0.5, 60.0)))
    return scene, 0, plan
