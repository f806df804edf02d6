"""The fixed differentiable op vocabulary.

Every op takes Tensors (python scalars and arrays are promoted to constant
leaves), returns a new Tensor and, when gradients are enabled and some input
requires them, records a closure that maps the upstream gradient to one
gradient per input.
"""

from __future__ import annotations

import builtins
import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import MAX_RANK, NonFiniteError, ShapeError, Tensor, as_tensor, grad_enabled, is_checked


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    if not is_checked():
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=inputs, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = pairwise_sum(grad, axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = pairwise_sum(grad, axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from None


def pairwise_sum(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Sum with a fixed halving tree so the result never depends on threading."""
    a = np.asarray(a)
    if axis is None:
        axis = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axis = (axis,)
    axes = sorted({ax % a.ndim for ax in axis}, reverse=True)
    out = a
    for ax in axes:
        out = np.moveaxis(out, ax, 0)
        while out.shape[0] > 1:
            n = out.shape[0]
            half = n // 2
            folded = out[:half] + out[half : 2 * half]
            if n % 2:
                folded = np.concatenate([folded, out[2 * half :]], axis=0)
            out = folded
        out = out[0]
    if keepdims:
        out = np.reshape(out, tuple(1 if i in axes else n for i, n in enumerate(a.shape)))
    return np.asarray(out)


# ----------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    _check_finite("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    _check_finite("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, "mul", (a, b), bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    _check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = np.argsort([a % x.ndim for a in axes])
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} mismatch off axis {axis}")
    _check_finite("concat", *(t.data for t in ts))
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        idx = [builtins.slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            idx[ax] = builtins.slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(g[tuple(idx)])
        return grads

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts), bw)


def slice(x, index) -> Tensor:  # noqa: A001 - op tag name
    """Basic (view) indexing: ints, slices and Ellipsis."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (int, builtins.slice, type(Ellipsis))):
            raise TypeError(f"slice: unsupported index component {i!r}")
    out = x.data[index]
    src_shape = x.shape

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[index] = g.reshape(out.shape)
        return (full,)

    return _make(out, "slice", (x,), bw)


def broadcast(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _make(out, "broadcast", (x,), lambda g: (_unbroadcast(g, src),))


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Pairwise-tree sum. A full reduction yields shape (1,)."""
    x = as_tensor(x)
    _check_finite("sum", x.data)
    ax = _norm_axis(axis, x.ndim)
    out = pairwise_sum(x.data, axis=ax, keepdims=keepdims)
    src = x.shape
    if ax is None or len(ax) == x.ndim:
        out = out.reshape(1) if not keepdims else out
        return _make(out, "sum", (x,), lambda g: (np.broadcast_to(g.reshape((1,) * len(src)), src).copy(),))
    kept = tuple(1 if i in ax else n for i, n in enumerate(src))
    return _make(out, "sum", (x,), lambda g: (np.broadcast_to(g.reshape(kept), src).copy(),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    count = x.data.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    s = sum(x, axis=axis, keepdims=keepdims)
    out = s.data / count

    def bw(g):
        return (g / count,)

    res = _make(out, "mean", (s,), bw)
    return res


# ----------------------------------------------------------------------------
# nonlinearities


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("tanh", x.data)
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows for large |a|
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("sigmoid", x.data)
    y = _sigmoid(x.data)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("silu", x.data)
    s = _sigmoid(x.data)
    xd = x.data
    return _make(xd * s, "silu", (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    _check_finite("layer_norm", x.data)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    del n
    return _make(xhat, "layer_norm", (x,), bw)


# ----------------------------------------------------------------------------
# spatial ops on (B, C, H, W)


def _conv2d(op: str, x, w, b, stride: int, pad: int) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"{op}: bias {b.shape} does not match {w.shape[0]} output channels")
    _check_finite(op, x.data, w.data, *([b.data] if b is not None else []))
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    if Hp < kh or Wp < kw:
        raise ShapeError(f"{op}: kernel {w.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    # im2col: rows are output positions (b, y, x), columns are (c, i, j)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O)
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        if x.requires_grad:
            # col2im in (c, i, j, b, y, x) layout so each kernel offset is a contiguous block
            gcols = (wmat.T @ g2.T).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W].transpose(1, 0, 2, 3)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = pairwise_sum(g, axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, op, parents, bw)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv2d("conv2d", x, w, b, stride, pad)


def conv2d_zero_init(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Same arithmetic as conv2d; tagged so residual taps are auditable in a graph."""
    return _conv2d("conv2d_zero_init", x, w, b, stride, pad)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avg_pool2d: shape {x.shape} not divisible by {k}")
    _check_finite("avg_pool2d", x.data)
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, "avg_pool2d", (x,), bw)


def upsample_nearest(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected (B, C, H, W), got {x.shape}")
    _check_finite("upsample_nearest", x.data)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest", (x,), bw)


# ----------------------------------------------------------------------------
# lookup and sampling


def _scatter_rows(n: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """out[k] = sum of rows[m] with idx[m] == k, for (M, D) rows; sorted segment sums."""
    out = np.zeros((n, rows.shape[1]), dtype=rows.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` (V, E) gathered by an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    if ids.ndim + 1 > MAX_RANK:
        raise ShapeError(f"embedding_lookup: ids of rank {ids.ndim} exceed rank budget")
    out = table.data[ids]
    n = table.shape[0]

    def bw(g):
        return (_scatter_rows(n, ids.reshape(-1), g.reshape(-1, g.shape[-1])),)

    return _make(out, "embedding_lookup", (table,), bw)


def linear_interp_1d(values, positions) -> Tensor:
    """Sample rows of ``values`` (B, L, D) at continuous ``positions`` (B, Q).

    Position p is read as ``(1 - f) * values[i] + f * values[i + 1]`` with
    ``i = min(floor(p), L - 2)`` and ``f = p - i``. Positions must lie in
    [0, L - 1]. Output shape (B, Q, D).
    """
    values, positions = as_tensor(values), as_tensor(positions)
    if values.ndim != 3 or positions.ndim != 2 or values.shape[0] != positions.shape[0]:
        raise ShapeError(f"linear_interp_1d: values {values.shape} / positions {positions.shape}")
    _check_finite("linear_interp_1d", values.data, positions.data)
    B, L, D = values.shape
    p = positions.data
    bidx = np.arange(B)[:, None]
    if L == 1:
        out = np.broadcast_to(values.data[:, :1, :], (B, p.shape[1], D)).copy()

        def bw1(g):
            return (g.sum(axis=1, keepdims=True), np.zeros_like(p))

        return _make(out, "linear_interp_1d", (values, positions), bw1)
    i0 = np.clip(np.floor(p).astype(np.int64), 0, L - 2)
    f = (p - i0)[..., None]
    v0 = values.data[bidx, i0]
    v1 = values.data[bidx, i0 + 1]
    out = (1.0 - f) * v0 + f * v1

    def bw(g):
        gv = None
        if values.requires_grad:
            flat = (bidx * L + i0).reshape(-1)
            rows = np.concatenate([(g * (1.0 - f)).reshape(-1, D), (g * f).reshape(-1, D)])
            gv = _scatter_rows(B * L, np.concatenate([flat, flat + 1]), rows).reshape(B, L, D)
        gp = (g * (v1 - v0)).sum(axis=-1)
        return gv, gp

    return _make(out, "linear_interp_1d", (values, positions), bw)


def scaled_dot_attention(q, k, v, scale: Optional[float] = None) -> Tensor:
    """softmax(q kᵀ · scale) v over the last two axes; leading axes broadcast."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"scaled_dot_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    _check_finite("scaled_dot_attention", q.data, k.data, v.data)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s -= np.max(s, axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= np.sum(p, axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape) if v.requires_grad else None
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        ds *= scale
        gq = _unbroadcast(ds @ kd, qd.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(ds, -1, -2) @ qd, kd.shape) if k.requires_grad else None
        return gq, gk, gv

    return _make(out, "scaled_dot_attention", (q, k, v), bw)


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice,
    "broadcast": broadcast,
    "sum": sum,
    "mean": mean,
    "softmax": softmax,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "silu": silu,
    "layer_norm": layer_norm,
    "conv2d": conv2d,
    "conv2d_zero_init": conv2d_zero_init,
    "avg_pool2d": avg_pool2d,
    "upsample_nearest": upsample_nearest,
    "embedding_lookup": embedding_lookup,
    "linear_interp_1d": linear_interp_1d,
    "scaled_dot_attention": scaled_dot_attention,
}


def forward_op(op: str, *inputs, **attrs) -> Tensor:
    """Apply the op registered under ``op``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **attrs)
