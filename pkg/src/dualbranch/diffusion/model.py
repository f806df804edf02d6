"""The dual-branch conditional denoiser.

A frozen-able base UNet predicts noise. Two conditioning stacks, background
and foreground, each turn a filtered ORS feature plus numeric scene tokens
into residuals for the base UNet's decoder taps:

    ORS labels -> OrsEmbedding -> SFA (spatial, text) -> v* -> branch encoder
    branch encoder taps -> zero-initialised 1x1 convs -> residuals

The background stack pairs the background ORS feature with box tokens, the
foreground stack pairs the foreground feature with map tokens. Residuals from
both stacks are summed per tap.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import Conv2d, Module, Parameter, ShapeError, Tensor, ZeroConv2d, ops
from ..encoders import ConditionEncoder, SceneFrame, TokenSeq, build_env, spatial_kinds
from ..ors import OrsEmbedding, SamplingPlan, render_ors
from ..scene.types import Scene
from ..sfa import SfaBlock
from .unet import Encoder, TimeEmbedding, UNet, UNetSpec

BRANCH_KINDS = {"background": "box", "foreground": "map"}


@dataclass(frozen=True)
class ModelSpec:
    unet: UNetSpec = field(default_factory=UNetSpec)
    visual_width: int = 16
    ors_class_dim: int = 4
    ors_samples: int = 32
    k_def: int = 4
    category_dim: int = 16
    T: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        doc = dict(doc)
        unet = UNetSpec(**doc.pop("unet", {}))
        return cls(unet=unet, **doc)


@dataclass
class VisualTokens:
    """(U*V, width) tokens tagged with the ORS filter they came from."""

    tokens: Tensor
    provenance: str
    size: tuple  # (U, V)


@dataclass
class ItemCondition:
    """Everything a training or sampling item needs from its scene and camera."""

    ors_background: np.ndarray  # (V, U, N) labels
    ors_foreground: np.ndarray
    scene: Optional[Scene] = None
    cam_index: int = 0

    @property
    def is_null(self) -> bool:
        return self.scene is None

    @classmethod
    def from_scene(cls, scene: Scene, cam_index: int, plan: SamplingPlan) -> "ItemCondition":
        bg = render_ors(scene, cam_index, plan, "background").labels
        fg = render_ors(scene, cam_index, plan, "foreground").labels
        return cls(bg, fg, scene, cam_index)

    @classmethod
    def null(cls, size, n_samples: int) -> "ItemCondition":
        U, V = size
        empty = np.zeros((V, U, n_samples), dtype=np.uint8)
        return cls(empty, empty)


class Branch(Module):
    """Copy of the base encoder fed by v*, ending in zero-initialised tap convolutions."""

    def __init__(self, rng: np.random.Generator, spec: ModelSpec, provenance: str):
        if provenance not in BRANCH_KINDS:
            raise ValueError(f"unknown branch provenance {provenance!r}")
        u = spec.unet
        self.time = TimeEmbedding(rng, u.time_width)
        self.encoder = Encoder(rng, u)
        self.hint = Conv2d(rng, spec.visual_width, u.base_channels)
        self.taps = [ZeroConv2d(c, c) for c in u.tap_channels]
        self._provenance = provenance

    @property
    def provenance(self) -> str:
        return self._provenance

    def copy_from(self, unet: UNet) -> None:
        """Warm start from the base network's encoder and time embedding."""
        self.time.load_state_dict(unet.time.state_dict())
        self.encoder.load_state_dict(unet.encoder.state_dict())

    def __call__(self, z: Tensor, t, visual: Sequence[VisualTokens], envs: Sequence[TokenSeq], T: int) -> List[Tensor]:
        kind = BRANCH_KINDS[self._provenance]
        for vt, env in zip(visual, envs):
            if vt.provenance != self._provenance:
                raise ValueError(f"{self._provenance} branch was given {vt.provenance} visual tokens")
            if spatial_kinds(env) != {kind}:
                raise ValueError(f"{self._provenance} branch expects {kind} tokens, got {sorted(spatial_kinds(env))}")
        B = z.shape[0]
        images = []
        for vt in visual:
            U, V = vt.size
            width = vt.tokens.shape[1]
            images.append(ops.reshape(ops.transpose(vt.tokens, (1, 0)), (1, width, V, U)))
        hint = self.hint(images[0] if B == 1 else ops.concat(images, axis=0))
        temb = self.time(t, T)
        feats = self.encoder(z, temb, [env.tokens for env in envs], hint=hint)
        return [tap(f) for tap, f in zip(self.taps, feats)]


class BranchStack(Module):
    """ORS embedding, SFA and branch network for one provenance."""

    def __init__(self, rng: np.random.Generator, spec: ModelSpec, provenance: str):
        self.ors = OrsEmbedding(rng, spec.ors_samples, spec.ors_class_dim, spec.visual_width)
        self.sfa = SfaBlock(rng, spec.visual_width, spec.unet.cond_width, spec.k_def)
        self.branch = Branch(rng, spec, provenance)
        self._provenance = provenance

    def visual(self, labels: np.ndarray, spatial: TokenSeq, text: TokenSeq) -> VisualTokens:
        V, U, _ = labels.shape
        v = ops.reshape(self.ors(labels), (V * U, self.sfa.d_visual))
        return VisualTokens(self.sfa(v, spatial.tokens, text.tokens), self._provenance, (U, V))


class DualBranchModel(Module):
    def __init__(self, rng: np.random.Generator, spec: ModelSpec = ModelSpec()):
        u = spec.unet
        self.unet = UNet(rng, u)
        # the base network is trained without conditions and only ever sees this context
        self.null_context = Parameter(rng.standard_normal((1, u.cond_width)) * 0.02)
        self.conditions = ConditionEncoder(rng, u.cond_width, spec.category_dim)
        self.background = BranchStack(rng, spec, "background")
        self.foreground = BranchStack(rng, spec, "foreground")
        self._spec = spec
        self.name_parameters()
        self.conditions.text_table.trainable = False

    @property
    def spec(self) -> ModelSpec:
        return self._spec

    def base_parameters(self) -> List[Parameter]:
        return self.unet.parameters() + [self.null_context]

    def condition_parameters(self) -> List[Parameter]:
        return self.conditions.parameters() + self.background.parameters() + self.foreground.parameters()

    def init_branches_from_base(self) -> None:
        self.background.branch.copy_from(self.unet)
        self.foreground.branch.copy_from(self.unet)

    # -- conditions ------------------------------------------------------------------

    def tokens(self, item: ItemCondition) -> Tuple[TokenSeq, TokenSeq, TokenSeq, TokenSeq]:
        """(camera, text, box, map) token sequences for one item; null tokens for a null item."""
        enc = self.conditions
        if item.is_null:
            return (
                TokenSeq(enc.null_cam, ["null_cam"]),
                TokenSeq(enc.null_text, ["null_text"]),
                TokenSeq(enc.null_box, ["null_box"]),
                TokenSeq(enc.null_map, ["null_map"]),
            )
        scene = item.scene
        frame = SceneFrame.of(scene.grid)
        return (
            enc.encode_camera(scene.camera(item.cam_index), frame),
            enc.encode_text(scene.prompt),
            enc.encode_entities(scene.boxes, "box", frame),
            enc.encode_entities(scene.map, "map", frame),
        )

    def residuals(self, z: Tensor, t, items: Sequence[ItemCondition]) -> List[Tensor]:
        if len(items) != z.shape[0]:
            raise ShapeError(f"{len(items)} conditions for batch of {z.shape[0]}")
        bg_vis, fg_vis, bg_envs, fg_envs = [], [], [], []
        for item in items:
            cam, text, boxes, polylines = self.tokens(item)
            bg_vis.append(self.background.visual(item.ors_background, boxes, text))
            fg_vis.append(self.foreground.visual(item.ors_foreground, polylines, text))
            bg_envs.append(build_env(cam, text, boxes))
            fg_envs.append(build_env(cam, text, polylines))
        T = self._spec.T
        bg = self.background.branch(z, t, bg_vis, bg_envs, T)
        fg = self.foreground.branch(z, t, fg_vis, fg_envs, T)
        return [ops.add(a, b) for a, b in zip(bg, fg)]

    # -- noise prediction ------------------------------------------------------------

    def base_eps(self, z: Tensor, t) -> Tensor:
        return self.unet(z, t, self.null_context, None, self._spec.T)

    def eps(self, z: Tensor, t, items: Sequence[ItemCondition]) -> Tensor:
        return self.unet(z, t, self.null_context, self.residuals(z, t, items), self._spec.T)
