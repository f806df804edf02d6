"""Semantic fusion attention.

Visual tokens from an embedded ORS feature are updated in three stages:
residual self-attention, gated attention over the visual tokens joined with
the spatial condition, and 1-D deformable sampling along the text tokens.
The gate scalar, the deformable offset/weight heads and the deformable output
projection all start at zero, so at construction the stack reduces to the
self-attention stage alone.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Linear, Module, Parameter, ShapeError, Tensor, ops


class Attention(Module):
    """Single-head attention with query/key/value/output projections."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_kv: int = None, d_head: int = None):
        d_kv = d_kv or d_model
        d_head = d_head or d_model
        self.q = Linear(rng, d_model, d_head, bias=False)
        self.k = Linear(rng, d_kv, d_head, bias=False)
        self.v = Linear(rng, d_kv, d_head, bias=False)
        self.o = Linear(rng, d_head, d_model)
        self._scale = 1.0 / math.sqrt(d_head)

    def __call__(self, queries: Tensor, keys: Tensor) -> Tensor:
        return self.o(ops.scaled_dot_attention(self.q(queries), self.k(keys), self.v(keys), self._scale))


class SfaBlock(Module):
    def __init__(self, rng: np.random.Generator, d_visual: int, d_cond: int, k_def: int = 4):
        self.self_attn = Attention(rng, d_visual)
        self.spatial_adapter = Linear(rng, d_cond, d_visual)
        self.ground_attn = Attention(rng, d_visual)
        self.gamma = Parameter(np.zeros(1))
        self.text_value = Linear(rng, d_cond, d_visual)
        self.offset_head = Linear(rng, d_visual, k_def, zero=True)
        self.weight_head = Linear(rng, d_visual, k_def, zero=True)
        self.deform_out = Linear(rng, d_visual, d_visual, zero=True)
        self._d_visual = d_visual
        self._k_def = k_def

    @property
    def d_visual(self) -> int:
        return self._d_visual

    @property
    def d_cond(self) -> int:
        return self.spatial_adapter.weight.shape[0]

    def _check(self, v: Tensor) -> None:
        if v.ndim != 2 or v.shape[1] != self._d_visual:
            raise ShapeError(f"visual tokens must be (count, {self._d_visual}), got {v.shape}")

    def self_attend(self, v: Tensor) -> Tensor:
        self._check(v)
        return ops.add(v, self.self_attn(v, v))

    def gated_ground(self, v1: Tensor, spatial: Tensor) -> Tensor:
        """Attend from visual positions over [visual; adapted spatial]; only visual outputs are kept."""
        self._check(v1)
        joint = ops.concat([v1, self.spatial_adapter(spatial)], axis=0)
        update = self.ground_attn(v1, joint)
        return ops.add(v1, ops.mul(ops.tanh(self.gamma), update))

    def sample_plan(self, queries: Tensor, n_text: int):
        """Continuous positions in [0, n_text - 1] and softmax weights, both (count, k_def)."""
        positions = ops.mul(ops.sigmoid(self.offset_head(queries)), float(n_text - 1))
        weights = ops.softmax(self.weight_head(queries), axis=-1)
        return positions, weights

    def deform_fuse(self, v2: Tensor, text: Tensor) -> Tensor:
        self._check(v2)
        if text.ndim != 2 or text.shape[0] < 1:
            raise ShapeError(f"deform_fuse needs at least one text token, got {text.shape}")
        count, n_text = v2.shape[0], text.shape[0]
        positions, weights = self.sample_plan(v2, n_text)
        values = ops.reshape(self.text_value(text), (1, n_text, self._d_visual))
        flat = ops.reshape(positions, (1, count * self._k_def))
        sampled = ops.reshape(ops.linear_interp_1d(values, flat), (count, self._k_def, self._d_visual))
        mixed = ops.sum(ops.mul(sampled, ops.reshape(weights, (count, self._k_def, 1))), axis=1)
        return ops.add(v2, self.deform_out(mixed))

    def __call__(self, v: Tensor, spatial: Tensor, text: Tensor) -> Tensor:
        return self.deform_fuse(self.gated_ground(self.self_attend(v), spatial), text)


def sfa_forward(block: SfaBlock, v: Tensor, spatial: Tensor, text: Tensor) -> Tensor:
    return block(v, spatial, text)
