"""Scene JSON documents and netpbm image writers."""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from .types import (
    TAXONOMY,
    BoundingBox3D,
    Camera,
    ClassTaxonomy,
    MapPolyline,
    OccupancyGrid,
    Scene,
)

SCENE_VERSION = 1

PathLike = Union[str, Path]


class SceneFormatError(ValueError):
    """A scene document failed validation; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def scene_to_dict(scene: Scene) -> Dict[str, Any]:
    g = scene.grid
    tax = scene.taxonomy
    return {
        "version": SCENE_VERSION,
        "seed": int(scene.seed),
        "dims": list(g.dims),
        "origin": [float(x) for x in g.origin],
        "voxel_size": float(g.voxel_size),
        "labels_b64": base64.b64encode(g.labels.tobytes()).decode("ascii"),
        "taxonomy": {
            "names": list(tax.names),
            "foreground": sorted(tax.foreground),
            "background": sorted(tax.background),
        },
        "boxes": [{"category": int(b.category), "corners": b.corners.tolist()} for b in scene.boxes],
        "map": [{"category": m.category, "points": m.points.tolist()} for m in scene.map],
        "cameras": [
            {"K": c.K.tolist(), "R": c.R.tolist(), "t": c.t.tolist(), "image_size": list(c.image_size)}
            for c in scene.cameras
        ],
        "prompt_tokens": [int(t) for t in scene.prompt],
    }


def dumps(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))


def _field(doc: dict, key: str, where: str = ""):
    if not isinstance(doc, dict) or key not in doc:
        raise SceneFormatError(f"{where}{key}", "missing")
    return doc[key]


def _array(value, shape, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise SceneFormatError(name, "not numeric") from None
    if arr.shape != shape:
        raise SceneFormatError(name, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SceneFormatError(name, "non-finite value")
    return arr


def scene_from_dict(doc: Dict[str, Any]) -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError("<root>", "expected a JSON object")
    version = _field(doc, "version")
    if version != SCENE_VERSION:
        raise SceneFormatError("version", f"unsupported version {version!r}")
    dims = _field(doc, "dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(n, int) and n >= 1 for n in dims)):
        raise SceneFormatError("dims", "expected three positive integers")
    origin = _array(_field(doc, "origin"), (3,), "origin")
    voxel_size = _field(doc, "voxel_size")
    if not isinstance(voxel_size, (int, float)) or not voxel_size > 0:
        raise SceneFormatError("voxel_size", "must be a positive number")
    try:
        raw = base64.b64decode(_field(doc, "labels_b64"), validate=True)
    except (ValueError, TypeError):
        raise SceneFormatError("labels_b64", "invalid base64") from None
    if len(raw) != dims[0] * dims[1] * dims[2]:
        raise SceneFormatError("labels_b64", f"decoded {len(raw)} bytes, expected {dims[0] * dims[1] * dims[2]}")
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(dims).copy()

    tax_doc = _field(doc, "taxonomy")
    try:
        taxonomy = ClassTaxonomy(
            tuple(_field(tax_doc, "names", "taxonomy.")),
            frozenset(_field(tax_doc, "foreground", "taxonomy.")),
            frozenset(_field(tax_doc, "background", "taxonomy.")),
        )
    except (TypeError, ValueError) as exc:
        raise SceneFormatError("taxonomy", str(exc)) from None
    if int(labels.max(initial=0)) >= taxonomy.num_classes:
        raise SceneFormatError("labels_b64", f"label {int(labels.max())} outside taxonomy")

    boxes = []
    for i, b in enumerate(_field(doc, "boxes")):
        where = f"boxes[{i}]"
        cat = _field(b, "category", where + ".")
        if cat not in taxonomy.foreground:
            raise SceneFormatError(where + ".category", f"{cat!r} is not a foreground class")
        boxes.append(BoundingBox3D(int(cat), _array(_field(b, "corners", where + "."), (8, 3), where + ".corners")))
        if not boxes[-1].is_cuboid():
            raise SceneFormatError(where + ".corners", "corners do not form a rectangular cuboid")

    polylines = []
    for i, m in enumerate(_field(doc, "map")):
        where = f"map[{i}]"
        try:
            polylines.append(MapPolyline(_field(m, "category", where + "."), _array(_field(m, "points", where + "."), (8, 3), where + ".points")))
        except ValueError as exc:
            if isinstance(exc, SceneFormatError):
                raise
            raise SceneFormatError(where, str(exc)) from None

    cameras = []
    for i, c in enumerate(_field(doc, "cameras")):
        where = f"cameras[{i}]"
        size = _field(c, "image_size", where + ".")
        if not (isinstance(size, list) and len(size) == 2 and all(isinstance(n, int) and n >= 1 for n in size)):
            raise SceneFormatError(where + ".image_size", "expected two positive integers")
        cam = Camera(
            _array(_field(c, "K", where + "."), (3, 3), where + ".K"),
            _array(_field(c, "R", where + "."), (3, 3), where + ".R"),
            _array(_field(c, "t", where + "."), (3,), where + ".t"),
            tuple(size),
        )
        try:
            cam.validate()
        except ValueError as exc:
            raise SceneFormatError(where, str(exc)) from None
        cameras.append(cam)

    prompt = _field(doc, "prompt_tokens")
    if not (isinstance(prompt, list) and all(isinstance(t, int) and t >= 0 for t in prompt)):
        raise SceneFormatError("prompt_tokens", "expected a list of non-negative integers")
    seed = _field(doc, "seed")
    if not isinstance(seed, int) or seed < 0:
        raise SceneFormatError("seed", "expected a non-negative integer")
    return Scene(OccupancyGrid(labels, origin, float(voxel_size)), boxes, polylines, cameras, list(prompt), seed, taxonomy)


def save_scene(path: PathLike, scene: Scene) -> None:
    Path(path).write_text(dumps(scene) + "\n")


def load_scene(path: PathLike) -> Scene:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError("<root>", f"invalid JSON: {exc}") from None
    return scene_from_dict(doc)


# --- netpbm ---------------------------------------------------------------------


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    """Binary P6, maxval 255, from a (V, U, 3) uint8 array."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    V, U, _ = img.shape
    Path(path).write_bytes(f"P6\n{U} {V}\n255\n".encode("ascii") + img.tobytes())


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Binary P5, maxval 255."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    V, U = img.shape
    Path(path).write_bytes(f"P5\n{U} {V}\n255\n".encode("ascii") + img.tobytes())


def write_pgm_ascii(path: PathLike, values: np.ndarray, maxval: int) -> None:
    """Plain P2 with integer samples."""
    vals = np.asarray(values, dtype=np.int64)
    V, U = vals.shape
    rows = "\n".join(" ".join(str(int(x)) for x in row) for row in vals)
    Path(path).write_text(f"P2\n{U} {V}\n{maxval}\n{rows}\n")


def read_pnm(path: PathLike) -> np.ndarray:
    """Read P2/P5/P6 written by this module."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic == b"P2":
        tokens = blob.split()
        U, V, _maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        return np.array([int(t) for t in tokens[4:]], dtype=np.int64).reshape(V, U)
    header = blob.split(b"\n", 3)
    U, V = (int(x) for x in header[1].split())
    payload = np.frombuffer(header[3], dtype=np.uint8)
    if magic == b"P6":
        return payload.reshape(V, U, 3).copy()
    if magic == b"P5":
        return payload.reshape(V, U).copy()
    raise ValueError(f"unsupported netpbm magic {magic!r}")


__all__ = [
    "SceneFormatError",
    "dumps",
    "load_scene",
    "read_pnm",
    "save_scene",
    "scene_from_dict",
    "scene_to_dict",
    "write_pgm",
    "write_pgm_ascii",
    "write_ppm",
    "TAXONOMY",
]
