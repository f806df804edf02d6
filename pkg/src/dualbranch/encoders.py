"""Numeric scene conditions: Fourier features, category tables and token heads.

Every encoder returns a :class:`TokenSeq`, a (count, width) tensor plus one
provenance tag per token, so assembled sequences can be audited for which
modality each position came from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .autodiff import MLP, Module, Parameter, ShapeError, Tensor, ops
from .scene.generator import VOCAB
from .scene.types import MAP_CATEGORIES, NUM_CLASSES, Camera, OccupancyGrid


@dataclass(frozen=True)
class FourierConfig:
    num_freqs: int = 8
    include_input: bool = True

    def width(self, n_scalars: int) -> int:
        return n_scalars * (2 * self.num_freqs + int(self.include_input))


def fourier_embed(x, cfg: FourierConfig = FourierConfig()) -> np.ndarray:
    """Per component ``[x?, sin(x), cos(x), sin(2x), cos(2x), ...]``, concatenated.

    Leading axes are kept; the last axis of a vector input is expanded. A
    scalar is treated as a length-1 vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    if not np.all(np.isfinite(x)):
        raise ValueError("fourier_embed: non-finite input")
    freqs = 2.0 ** np.arange(cfg.num_freqs)
    ang = x[..., None] * freqs  # (..., n, L)
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape, 2 * cfg.num_freqs)
    if cfg.include_input:
        parts = np.concatenate([x[..., None], parts], axis=-1)
    return parts.reshape(*x.shape[:-1], -1)


@dataclass(frozen=True)
class SceneFrame:
    """Affine map taking the grid's bounding box onto [-1, 1]^3."""

    center: np.ndarray
    half_extent: np.ndarray

    @classmethod
    def of(cls, grid: OccupancyGrid) -> "SceneFrame":
        ext = np.asarray(grid.extent, dtype=np.float64)
        return cls(grid.origin + ext / 2.0, ext / 2.0)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.half_extent


@dataclass
class TokenSeq:
    tokens: Tensor
    tags: List[str]

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(self.tags):
            raise ShapeError(f"token tensor {self.tokens.shape} does not match {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def camera_scalars(camera: Camera, frame: SceneFrame) -> np.ndarray:
    """Row-major K (9) then R (9) then t (3); K scaled by image size, t by the scene frame."""
    U, V = camera.image_size
    K = camera.K / np.array([[U], [V], [1.0]])
    t = camera.t / float(np.max(frame.half_extent))
    return np.concatenate([K.reshape(-1), camera.R.reshape(-1), t])


class ConditionEncoder(Module):
    """Category tables and the four perceptron heads producing width-``width`` tokens.

    The text table stands in for a frozen pretrained text encoder: it is drawn
    once from the construction RNG and never trained. Box and map category
    tables are trainable.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        width: int = 64,
        category_dim: int = 16,
        hidden: int = 64,
        fourier: FourierConfig = FourierConfig(),
        vocab_size: int = len(VOCAB),
    ):
        self._fourier = fourier
        self._vocab_size = vocab_size
        geo = fourier.width(24)
        self.box_table = Parameter(rng.standard_normal((NUM_CLASSES, category_dim)) * 0.5)
        self.map_table = Parameter(rng.standard_normal((len(MAP_CATEGORIES), category_dim)) * 0.5)
        self.text_table = Parameter(rng.standard_normal((vocab_size, category_dim)) * 0.5, trainable=False)
        self.box_head = MLP(rng, category_dim + geo, hidden, width)
        self.map_head = MLP(rng, category_dim + geo, hidden, width)
        self.cam_head = MLP(rng, fourier.width(21), hidden, width)
        self.text_head = MLP(rng, category_dim, hidden, width)
        self.null_box = Parameter(rng.standard_normal((1, width)) * 0.02)
        self.null_map = Parameter(rng.standard_normal((1, width)) * 0.02)
        self.null_text = Parameter(rng.standard_normal((1, width)) * 0.02)
        self.null_cam = Parameter(rng.standard_normal((1, width)) * 0.02)
        self._width = width

    @property
    def width(self) -> int:
        return self._width

    def set_trainable(self, flag: bool) -> None:
        super().set_trainable(flag)
        self.text_table.trainable = False

    def entity_features(self, entities: Sequence, kind: str, frame: SceneFrame) -> np.ndarray:
        pts = []
        for e in entities:
            p = e.corners if kind == "box" else e.points
            if np.shape(p) != (8, 3):
                raise ValueError(f"{kind} entity needs 8 points, got shape {np.shape(p)}")
            pts.append(frame.normalize(p).reshape(-1))
        return fourier_embed(np.stack(pts), self._fourier)

    def encode_entities(self, entities: Sequence, kind: str, frame: SceneFrame) -> TokenSeq:
        if kind not in ("box", "map"):
            raise ValueError(f"unknown entity kind {kind!r}")
        if not entities:
            return TokenSeq(self.null_box if kind == "box" else self.null_map, [f"null_{kind}"])
        geo = self.entity_features(entities, kind, frame)
        if kind == "box":
            ids = np.array([int(e.category) for e in entities], dtype=np.int64)
            table, head = self.box_table, self.box_head
        else:
            ids = np.array([MAP_CATEGORIES.index(e.category) for e in entities], dtype=np.int64)
            table, head = self.map_table, self.map_head
        x = ops.concat([ops.embedding_lookup(table, ids), geo], axis=1)
        return TokenSeq(head(x), [kind] * len(entities))

    def encode_camera(self, camera: Camera, frame: SceneFrame) -> TokenSeq:
        feats = fourier_embed(camera_scalars(camera, frame), self._fourier)[None, :]
        return TokenSeq(self.cam_head(Tensor(feats)), ["cam"])

    def encode_text(self, prompt: Sequence[int]) -> TokenSeq:
        ids = np.asarray(list(prompt), dtype=np.int64)
        if ids.size == 0:
            return TokenSeq(self.null_text, ["null_text"])
        if ids.min() < 0 or ids.max() >= self._vocab_size:
            raise ValueError(f"token id out of vocabulary of size {self._vocab_size}")
        return TokenSeq(self.text_head(ops.embedding_lookup(self.text_table, ids)), ["text"] * len(ids))

    def null_env(self, spatial_kind: str) -> TokenSeq:
        """The fully dropped condition used for guidance."""
        spatial = self.null_box if spatial_kind == "box" else self.null_map
        return build_env(
            TokenSeq(self.null_cam, ["null_cam"]),
            TokenSeq(self.null_text, ["null_text"]),
            TokenSeq(spatial, [f"null_{spatial_kind}"]),
        )


def build_env(cam: TokenSeq, text: TokenSeq, spatial: TokenSeq) -> TokenSeq:
    """Concatenate along the token axis in the order (camera, text, spatial)."""
    widths = {cam.width, text.width, spatial.width}
    if len(widths) != 1:
        raise ShapeError(f"build_env: token widths differ ({cam.width}, {text.width}, {spatial.width})")
    return TokenSeq(ops.concat([cam.tokens, text.tokens, spatial.tokens], axis=0), cam.tags + text.tags + spatial.tags)


def spatial_kinds(env: TokenSeq) -> set:
    """Which spatial modalities appear in an assembled sequence."""
    return {t.replace("null_", "") for t in env.tags} & {"box", "map"}
