"""Finite-difference gradient suites shared by the test-suite and ``verify``.

Each case is ``(name, loss_fn, params, names, tol)``: a scalar loss closure
over float64 parameters and the relative-error bound it must meet. Linear
ops are held to a tighter bound than smooth ones.
"""

from __future__ import annotations

from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import Parameter, Tensor, default_dtype, forward_op, ops
from .autodiff.gradcheck import check_gradients

LINEAR_TOL = 1e-7
SMOOTH_TOL = 1e-4


class Case(NamedTuple):
    name: str
    loss_fn: Callable[[], Tensor]
    params: Sequence[Tensor]
    names: Optional[Sequence[str]]
    tol: float


class Outcome(NamedTuple):
    name: str
    error: float
    tol: float
    worst_param: str

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _param(rng, *shape):
    return Parameter(rng.uniform(-1, 1, size=shape))


def projected(out: Tensor, seed: int = 99) -> Tensor:
    """Random linear functional of ``out`` so every output element carries gradient."""
    proj = np.random.default_rng(seed).uniform(-1, 1, size=out.shape)
    return ops.sum(ops.mul(out, proj))


def op_cases(rng: np.random.Generator) -> List[Case]:
    """One case per registered op (plus a strided convolution). Build under float64."""
    cases = []

    def add(name, fn, params, tol):
        cases.append(Case(name, fn, params, None, tol))

    def binary(op, sa, sb, tol):
        a, b = _param(rng, *sa), _param(rng, *sb)
        add(op, lambda: projected(forward_op(op, a, b)), [a, b], tol)

    binary("add", (3, 4), (4,), LINEAR_TOL)
    binary("sub", (2, 3, 4), (3, 1), LINEAR_TOL)
    binary("mul", (3, 4), (3, 4), SMOOTH_TOL)
    binary("matmul", (2, 3, 4), (4, 5), SMOOTH_TOL)

    x = _param(rng, 2, 3, 4)
    add("reshape", lambda: projected(forward_op("reshape", x, (4, 6))), [x], LINEAR_TOL)
    add("transpose", lambda: projected(forward_op("transpose", x, (2, 0, 1))), [x], LINEAR_TOL)
    y = _param(rng, 2, 5, 4)
    add("concat", lambda: projected(forward_op("concat", x, y, axis=1)), [x, y], LINEAR_TOL)
    add("slice", lambda: projected(forward_op("slice", x, (slice(None), slice(1, 3)))), [x], LINEAR_TOL)
    z = _param(rng, 3, 1)
    add("broadcast", lambda: projected(forward_op("broadcast", z, (2, 3, 4))), [z], LINEAR_TOL)
    add("sum", lambda: projected(forward_op("sum", x, axis=(0, 2))), [x], LINEAR_TOL)
    add("mean", lambda: projected(forward_op("mean", x, axis=1, keepdims=True)), [x], LINEAR_TOL)
    for op in ("tanh", "sigmoid", "silu"):
        add(op, lambda op=op: projected(forward_op(op, x)), [x], SMOOTH_TOL)
    add("softmax", lambda: projected(forward_op("softmax", x, axis=1)), [x], SMOOTH_TOL)
    add("layer_norm", lambda: projected(forward_op("layer_norm", x)), [x], SMOOTH_TOL)

    img = _param(rng, 2, 3, 6, 6)
    k = _param(rng, 4, 3, 3, 3)
    bias = _param(rng, 4)
    for op in ("conv2d", "conv2d_zero_init"):
        add(op, lambda op=op: projected(forward_op(op, img, k, bias, stride=1, pad=1)), [img, k, bias], SMOOTH_TOL)
    add("conv2d_stride2", lambda: projected(ops.conv2d(img, k, bias, stride=2, pad=1)), [img, k, bias], SMOOTH_TOL)
    add("avg_pool2d", lambda: projected(forward_op("avg_pool2d", img)), [img], LINEAR_TOL)
    add("upsample_nearest", lambda: projected(forward_op("upsample_nearest", img)), [img], LINEAR_TOL)

    table = _param(rng, 6, 3)
    ids = np.array([[0, 5, 2], [2, 2, 1]])
    add("embedding_lookup", lambda: projected(forward_op("embedding_lookup", table, ids)), [table], LINEAR_TOL)

    vals = _param(rng, 2, 5, 3)
    pos = Parameter(rng.uniform(0.05, 3.95, size=(2, 7)))
    add("linear_interp_1d", lambda: projected(forward_op("linear_interp_1d", vals, pos)), [vals, pos], SMOOTH_TOL)

    q, kk, v = _param(rng, 2, 5, 4), _param(rng, 2, 6, 4), _param(rng, 2, 6, 3)
    add("scaled_dot_attention", lambda: projected(forward_op("scaled_dot_attention", q, kk, v)), [q, kk, v], SMOOTH_TOL)
    return cases


def _perturb_zero_init(module, rng, scale=0.3):
    """Give zero-initialised heads and gates random values so every path carries gradient."""
    for name, p in module.named_parameters():
        if p.trainable and not np.any(p.data):
            p.assign(rng.standard_normal(p.shape) * scale)


def module_cases(rng: np.random.Generator, scene=None) -> List[Case]:
    """Every trainable parameter of SFA, the condition encoder, a branch and the UNet."""
    from .diffusion.model import DualBranchModel, ModelSpec, VisualTokens
    from .diffusion.unet import UNetSpec
    from .encoders import SceneFrame, TokenSeq
    from .scene.generator import generate_scene

    scene = scene if scene is not None else generate_scene(7)
    spec = ModelSpec(unet=UNetSpec(base_channels=2, time_width=8, cond_width=6, attn_width=4), visual_width=3, ors_samples=4, category_dim=3)
    model = DualBranchModel(rng, spec)
    _perturb_zero_init(model, rng)
    cases = []

    def named(module):
        pairs = [(n, p) for n, p in module.named_parameters() if p.trainable]
        return [p for _, p in pairs], [n for n, _ in pairs]

    # SFA
    sfa = model.background.sfa
    v, sp, text = (Tensor(rng.standard_normal(s)) for s in [(7, 3), (3, 6), (4, 6)])
    params, names = named(sfa)
    cases.append(Case("sfa", lambda: projected(ops.tanh(sfa(v, sp, text))), params, names, SMOOTH_TOL))

    # condition encoder
    enc = model.conditions
    frame = SceneFrame.of(scene.grid)

    def enc_loss():
        parts = [
            enc.encode_entities(scene.boxes, "box", frame).tokens,
            enc.encode_entities(scene.map, "map", frame).tokens,
            enc.encode_camera(scene.cameras[0], frame).tokens,
            enc.encode_text(scene.prompt).tokens,
            enc.null_env("box").tokens,
            enc.null_env("map").tokens,
        ]
        return projected(ops.tanh(ops.concat(parts, axis=0)))

    params, names = named(enc)
    cases.append(Case("encoders", enc_loss, params, names, SMOOTH_TOL))

    # one branch, fed by externally supplied visual tokens
    branch = model.foreground.branch
    visual = [VisualTokens(Tensor(rng.standard_normal((64, 3))), "foreground", (8, 8))]
    env = TokenSeq(Tensor(rng.standard_normal((4, 6))), ["cam", "text", "map", "map"])
    zb = Tensor(rng.standard_normal((1, 3, 8, 8)))

    def branch_loss():
        out = branch(zb, [250], visual, [env], spec.T)
        total = projected(out[0], 1)
        for i, r in enumerate(out[1:], start=2):
            total = ops.add(total, projected(r, i))
        return total

    params, names = named(branch)
    cases.append(Case("branch", branch_loss, params, names, SMOOTH_TOL))

    # base UNet with per-item contexts
    unet = model.unet
    zu = Tensor(rng.standard_normal((2, 3, 8, 8)))
    ctx = [Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((2, 6)))]
    params, names = named(unet)
    cases.append(Case("unet", lambda: projected(unet(zu, np.array([3, 700]), ctx, None, spec.T)), params, names, SMOOTH_TOL))
    return cases


def run_cases(cases: Sequence[Case], entries: int = 3, directions: int = 1, seed: int = 0) -> List[Outcome]:
    out = []
    with default_dtype(np.float64):
        for case in cases:
            results = check_gradients(
                case.loss_fn, case.params, names=case.names, entries=entries, directions=directions, rng=np.random.default_rng(seed)
            )
            worst = max(results, key=lambda r: r.max_rel_error)
            out.append(Outcome(case.name, worst.max_rel_error, case.tol, worst.name))
    return out


def build_and_run(builder, seed: int, **kw) -> List[Outcome]:
    with default_dtype(np.float64):
        cases = builder(np.random.default_rng(seed))
        return run_cases(cases, **kw)
