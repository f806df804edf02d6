import itertools
import json

import numpy as np
import pytest

from dualbranch import oracles
from dualbranch.scene import (
    TAXONOMY,
    BoundingBox3D,
    Camera,
    GeneratorConfig,
    InfeasibleSpecError,
    OccupancyGrid,
    Scene,
    SceneFormatError,
    generate_scene,
    rasterize_reference,
    resample_polyline,
)
from dualbranch.scene import io as scene_io
from dualbranch.scene.raster import first_hits, sky_color
from dualbranch.scene.types import PALETTE, VEHICLE


def test_generator_is_deterministic():
    a = scene_io.dumps(generate_scene(7))
    b = scene_io.dumps(generate_scene(7))
    assert a == b
    assert a != scene_io.dumps(generate_scene(8))


def test_zero_vehicles_means_no_foreground():
    scene = generate_scene(3, GeneratorConfig(vehicles=(0, 0), pedestrians=(0, 0)))
    assert scene.boxes == []
    assert not np.isin(scene.grid.labels, list(TAXONOMY.foreground)).any()


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_every_foreground_voxel_in_exactly_one_box(seed):
    scene = generate_scene(seed, GeneratorConfig(vehicles=(3, 3), pedestrians=(1, 2)))
    assert sum(b.category == VEHICLE for b in scene.boxes) == 3
    fg = np.argwhere(np.isin(scene.grid.labels, list(TAXONOMY.foreground)))
    centres = scene.grid.origin + (fg + 0.5) * scene.grid.voxel_size
    # exhaustive point-in-cuboid test of every voxel centre against every box
    inside = np.stack([b.contains(centres) for b in scene.boxes], axis=1)
    assert np.all(inside.sum(axis=1) == 1)
    for i, b in enumerate(scene.boxes):
        labels = scene.grid.labels[tuple(fg[inside[:, i]].T)]
        assert np.all(labels == b.category)


def test_boxes_are_cuboids_and_foreground(scene7):
    for b in scene7.boxes:
        assert b.is_cuboid()
        assert b.category in TAXONOMY.foreground


def test_rotated_box_is_cuboid():
    b = BoundingBox3D.from_center(VEHICLE, (1.0, 2.0, 0.5), (4.0, 2.0, 1.5), yaw=0.7)
    assert b.is_cuboid()
    bent = b.corners.copy()
    bent[5] += 0.1
    assert not BoundingBox3D(VEHICLE, bent).is_cuboid()


def test_gray_code_corner_order():
    b = BoundingBox3D.from_center(VEHICLE, (0, 0, 0), (2, 2, 2))
    signs = np.sign(b.corners)
    # consecutive corners differ in exactly one axis
    for a, c in zip(signs, np.roll(signs, -1, axis=0)):
        assert np.sum(a != c) == 1
    np.testing.assert_array_equal(signs[0], [-1, -1, -1])


def test_infeasible_spec_rejected():
    with pytest.raises(InfeasibleSpecError, match="slots"):
        generate_scene(0, GeneratorConfig(dims=(12, 32, 8), vehicles=(5, 5)))
    with pytest.raises(InfeasibleSpecError):
        generate_scene(0, GeneratorConfig(cameras=7))
    with pytest.raises(InfeasibleSpecError):
        generate_scene(0, GeneratorConfig(dims=(65, 32, 8)))


def test_taxonomy_partition_reconstructs_grid(scene7):
    g = scene7.grid
    fg = g.filtered(TAXONOMY.foreground).labels
    bg = g.filtered(TAXONOMY.background).labels
    assert not np.any((fg != 0) & (bg != 0))
    np.testing.assert_array_equal(np.where(fg != 0, fg, bg), g.labels)


def test_every_polyline_has_eight_points():
    for seed in range(6):
        for m in generate_scene(seed).map:
            assert m.points.shape == (8, 3)


def test_cameras_are_proper_rotations(scene7):
    for cam in scene7.cameras:
        cam.validate()
        np.testing.assert_allclose(cam.center, -cam.R.T @ cam.t)


# --- polyline resampling -------------------------------------------------------


def test_resample_straight_segment():
    out = resample_polyline([[0, 0, 0], [7, 0, 0]])
    np.testing.assert_allclose(out[:, 0], np.arange(8), atol=1e-12)
    np.testing.assert_array_equal(out[0], [0, 0, 0])
    np.testing.assert_array_equal(out[-1], [7, 0, 0])


def test_resample_fixed_point():
    pts = np.stack([np.arange(8) * 0.5, np.zeros(8), np.ones(8)], axis=1)
    np.testing.assert_allclose(resample_polyline(pts), pts, atol=1e-9)


def test_resample_l_shape_arc_lengths():
    out = resample_polyline([[0, 0, 0], [3, 0, 0], [3, 5, 0]])
    # arc length of each output point measured along the original L
    arc = np.where(out[:, 1] == 0, out[:, 0], 3 + out[:, 1])
    np.testing.assert_allclose(arc, np.arange(8) * 8 / 7, atol=1e-12)
    np.testing.assert_array_equal(out[-1], [3, 5, 0])


def test_resample_rejects_degenerate():
    with pytest.raises(ValueError):
        resample_polyline([[1, 1, 1], [1, 1, 1]])
    with pytest.raises(ValueError):
        resample_polyline([[1, 1, 1]])


# --- reference rasterizer ---------------------------------------------------------


def _forward_camera(size=(15, 15)):
    return Camera.looking((0.0, 0.0, 0.0), 0.0, 0.0, size, 60.0)


def test_empty_grid_is_pure_sky():
    scene = Scene(OccupancyGrid.empty((8, 8, 8), origin=(-4, -4, -4)), cameras=[_forward_camera()])
    img = rasterize_reference(scene, 0)
    _, _, dirs = first_hits(scene, 0)
    np.testing.assert_array_equal(img, sky_color(dirs))


def test_single_voxel_on_axis_projects_to_principal_point():
    grid = OccupancyGrid.empty((16, 5, 5), origin=(-0.5, -2.5, -2.5))
    grid.labels[6, 2, 2] = 4  # voxel centred on the optical axis at x = 6
    cam = _forward_camera((15, 15))
    scene = Scene(grid, cameras=[cam])
    label, _, _ = first_hits(scene, 0)
    vs, us = np.nonzero(label == 4)
    assert len(us) > 0
    assert us.mean() + 0.5 == pytest.approx(cam.K[0, 2])
    assert vs.mean() + 0.5 == pytest.approx(cam.K[1, 2])
    img = rasterize_reference(scene, 0)
    assert np.allclose(img[7, 7] / PALETTE[4], img[7, 7, 0] / PALETTE[4, 0])


@pytest.mark.parametrize("seed", [7, 11])
def test_rasterizer_matches_fine_step_oracle(seed):
    scene = generate_scene(seed, GeneratorConfig(image_size=(12, 10), cameras=2))
    for c in range(2):
        fast = rasterize_reference(scene, c)
        slow = oracles.naive_raster(scene, c)
        np.testing.assert_array_equal(fast, slow)


def test_hit_depths_non_decreasing_in_sample_index(scene7):
    from dualbranch.ors import lookup_points, pixel_rays
    from dualbranch.scene.raster import MarchPlan

    plan = MarchPlan.for_scene(scene7)
    centre, dirs = pixel_rays(scene7.cameras[0])
    pts = centre + dirs[:, :, None, :] * plan.depths[None, None, :, None]
    labels = lookup_points(scene7.grid, pts)
    depth_of_hits = np.where(labels != 0, plan.depths, np.nan)
    for row in depth_of_hits.reshape(-1, plan.count):
        hits = row[~np.isnan(row)]
        assert np.all(np.diff(hits) > 0)


def test_image_range(scene7):
    img = rasterize_reference(scene7, 1)
    assert img.shape == (32, 32, 3)
    assert img.min() >= 0 and img.max() <= 1


# --- scene file format ------------------------------------------------------------


def test_scene_json_round_trip(tmp_path, scene7):
    path = tmp_path / "s.json"
    scene_io.save_scene(path, scene7)
    back = scene_io.load_scene(path)
    assert scene_io.dumps(back) == scene_io.dumps(scene7)
    doc = json.loads(path.read_text())
    assert set(doc) == {
        "version", "seed", "dims", "origin", "voxel_size", "labels_b64",
        "taxonomy", "boxes", "map", "cameras", "prompt_tokens",
    }


def test_labels_b64_index_order(scene7):
    import base64

    raw = np.frombuffer(base64.b64decode(scene_io.scene_to_dict(scene7)["labels_b64"]), dtype=np.uint8)
    H, W, D = scene7.grid.dims
    for i, j, k in itertools.islice(zip(*np.nonzero(scene7.grid.labels)), 50):
        assert raw[(i * W + j) * D + k] == scene7.grid.labels[i, j, k]


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.pop("dims"), "dims"),
        (lambda d: d["cameras"][0].update(K=[[1, 0], [0, 1]]), "cameras[0].K"),
        (lambda d: d["boxes"][0].update(category=2), "boxes[0].category"),
        (lambda d: d.update(labels_b64="AAAA"), "labels_b64"),
        (lambda d: d["map"][1].update(points=[[0, 0, 0]] * 8), "map[1]"),
    ],
)
def test_malformed_scene_names_field(scene7, mutate, field):
    doc = scene_io.scene_to_dict(scene7)
    mutate(doc)
    with pytest.raises(SceneFormatError) as err:
        scene_io.scene_from_dict(doc)
    assert err.value.field == field


def test_ppm_pgm_writers(tmp_path):
    img = (np.arange(4 * 5 * 3) % 256).astype(np.uint8).reshape(4, 5, 3)
    scene_io.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 4\n255\n")
    np.testing.assert_array_equal(scene_io.read_pnm(tmp_path / "a.ppm"), img)
    scene_io.write_pgm_ascii(tmp_path / "m.pgm", np.full((2, 3), 19375), 20000)
    np.testing.assert_array_equal(scene_io.read_pnm(tmp_path / "m.pgm"), np.full((2, 3), 19375))
