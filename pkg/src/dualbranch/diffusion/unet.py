"""A small noise-prediction UNet.

Layout for base width ``c`` on a (3, V, U) latent:

    conv_in -> res(c) ------------------------------ tap 0 (V, U, c)
            -> pool -> res(2c) --------------------- tap 1 (V/2, U/2, 2c)
            -> pool -> res(2c), cross-attn, res(2c)  tap 2 (V/4, U/4, 2c)
    decoder: up(tap 2) ++ tap 1 -> res(2c) -> up ++ tap 0 -> res(c) -> conv_out

Residuals supplied by conditioning branches are added to the three taps
before the decoder reads them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from ..autodiff import MLP, Conv2d, Linear, Module, ShapeError, Tensor, ops
from ..encoders import FourierConfig, fourier_embed

TIME_FOURIER = FourierConfig(num_freqs=8, include_input=True)


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 3
    base_channels: int = 16
    time_width: int = 64
    cond_width: int = 64
    attn_width: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tap_channels(self) -> List[int]:
        c = self.base_channels
        return [c, 2 * c, 2 * c]


def time_features(t, T: int) -> np.ndarray:
    """(B, width) Fourier features of t / T."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return fourier_embed(t / float(T), TIME_FOURIER)


class TimeEmbedding(Module):
    def __init__(self, rng: np.random.Generator, width: int):
        self.mlp = MLP(rng, TIME_FOURIER.width(1), width, width)

    def __call__(self, t, T: int) -> Tensor:
        return self.mlp(Tensor(time_features(t, T)))


class ResBlock(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, time_width: int):
        self.conv1 = Conv2d(rng, c_in, c_out)
        self.time_proj = Linear(rng, time_width, c_out)
        self.conv2 = Conv2d(rng, c_out, c_out)
        self.skip = Conv2d(rng, c_in, c_out, k=1) if c_in != c_out else None
        self._c_out = c_out

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(x))
        shift = ops.reshape(self.time_proj(ops.silu(temb)), (temb.shape[0], self._c_out, 1, 1))
        h = self.conv2(ops.silu(ops.add(h, shift)))
        return ops.add(x if self.skip is None else self.skip(x), h)


Context = Union[Tensor, Sequence[Tensor]]


class CrossAttention(Module):
    """Image positions attend to condition tokens; one shared context or one per item."""

    def __init__(self, rng: np.random.Generator, channels: int, cond_width: int, width: int):
        self.q = Linear(rng, channels, width, bias=False)
        self.k = Linear(rng, cond_width, width, bias=False)
        self.v = Linear(rng, cond_width, width, bias=False)
        self.o = Linear(rng, width, channels)
        self._scale = 1.0 / math.sqrt(width)

    def __call__(self, x: Tensor, context: Context) -> Tensor:
        B, C, H, W = x.shape
        tokens = ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))
        q = self.q(tokens)
        if isinstance(context, Tensor):
            att = ops.scaled_dot_attention(q, self.k(context), self.v(context), self._scale)
        else:
            if len(context) != B:
                raise ShapeError(f"cross-attention got {len(context)} contexts for batch {B}")
            parts = [
                ops.scaled_dot_attention(ops.slice(q, (np.s_[i : i + 1],)), self.k(c), self.v(c), self._scale)
                for i, c in enumerate(context)
            ]
            att = parts[0] if B == 1 else ops.concat(parts, axis=0)
        out = ops.reshape(ops.transpose(self.o(att), (0, 2, 1)), (B, C, H, W))
        return ops.add(x, out)


class Encoder(Module):
    """Input stem, two resolution stages and the attention bottleneck."""

    def __init__(self, rng: np.random.Generator, spec: UNetSpec):
        c = spec.base_channels
        self.conv_in = Conv2d(rng, spec.in_channels, c)
        self.down0 = ResBlock(rng, c, c, spec.time_width)
        self.down1 = ResBlock(rng, c, 2 * c, spec.time_width)
        self.mid1 = ResBlock(rng, 2 * c, 2 * c, spec.time_width)
        self.mid_attn = CrossAttention(rng, 2 * c, spec.cond_width, spec.attn_width)
        self.mid2 = ResBlock(rng, 2 * c, 2 * c, spec.time_width)

    def __call__(self, x: Tensor, temb: Tensor, context: Context, hint: Optional[Tensor] = None) -> List[Tensor]:
        h = self.conv_in(x)
        if hint is not None:
            h = ops.add(h, hint)
        s0 = self.down0(h, temb)
        s1 = self.down1(ops.avg_pool2d(s0, 2), temb)
        m = self.mid1(ops.avg_pool2d(s1, 2), temb)
        m = self.mid2(self.mid_attn(m, context), temb)
        return [s0, s1, m]


class UNet(Module):
    def __init__(self, rng: np.random.Generator, spec: UNetSpec = UNetSpec()):
        c = spec.base_channels
        self.time = TimeEmbedding(rng, spec.time_width)
        self.encoder = Encoder(rng, spec)
        self.up1 = ResBlock(rng, 4 * c, 2 * c, spec.time_width)
        self.up0 = ResBlock(rng, 3 * c, c, spec.time_width)
        self.conv_out = Conv2d(rng, c, spec.in_channels)
        self._spec = spec

    @property
    def spec(self) -> UNetSpec:
        return self._spec

    def __call__(
        self,
        z: Tensor,
        t,
        context: Context,
        residuals: Optional[Sequence[Optional[Tensor]]] = None,
        T: int = 1000,
    ) -> Tensor:
        if z.ndim != 4 or z.shape[2] % 4 or z.shape[3] % 4:
            raise ShapeError(f"latent must be (B, C, V, U) with V, U divisible by 4, got {z.shape}")
        temb = self.time(t, T)
        taps = self.encoder(z, temb, context)
        if residuals is not None:
            if len(residuals) != len(taps):
                raise ShapeError(f"expected {len(taps)} residual taps, got {len(residuals)}")
            merged = []
            for i, (tap, res) in enumerate(zip(taps, residuals)):
                if res is not None:
                    if res.shape != tap.shape:
                        raise ShapeError(f"residual tap {i}: shape {res.shape} does not match {tap.shape}")
                    tap = ops.add(tap, res)
                merged.append(tap)
            taps = merged
        s0, s1, m = taps
        h = self.up1(ops.concat([ops.upsample_nearest(m, 2), s1], axis=1), temb)
        h = self.up0(ops.concat([ops.upsample_nearest(h, 2), s0], axis=1), temb)
        return self.conv_out(ops.silu(h))
