import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualbranch.autodiff import ShapeError, Tensor, default_dtype, ops
from dualbranch.autodiff.gradcheck import check_gradients, worst
from dualbranch.sfa import SfaBlock, sfa_forward

D_VIS, D_COND = 6, 5


def _block(seed=0, k_def=4):
    return SfaBlock(np.random.default_rng(seed), D_VIS, D_COND, k_def)


def _tokens(n, width, seed):
    return Tensor(np.random.default_rng(seed).standard_normal((n, width)))


def _randomize_heads(block, rng):
    for lin in (block.offset_head, block.weight_head, block.deform_out):
        lin.weight.assign(rng.standard_normal(lin.weight.shape) * 0.5)
        lin.bias.assign(rng.standard_normal(lin.bias.shape) * 0.5)


def test_single_token_self_attention():
    with default_dtype(np.float64):
        block = _block()
        v = _tokens(1, D_VIS, 1)
        out = block.self_attend(v).data
        a = block.self_attn
        expected = v.data + (v.data @ a.v.weight.data) @ a.o.weight.data + a.o.bias.data
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_self_attention_permutation_equivariant():
    with default_dtype(np.float64):
        block = _block()
        v = _tokens(9, D_VIS, 2)
        perm = np.random.default_rng(3).permutation(9)
        a = block.self_attend(Tensor(v.data[perm])).data
        b = block.self_attend(v).data[perm]
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        _block().self_attend(_tokens(4, D_VIS + 1, 0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_gate_identity_at_zero(n_vis, n_sp, seed, scale):
    block = _block(seed % 7)
    rng = np.random.default_rng(seed)
    v1 = Tensor(rng.standard_normal((n_vis, D_VIS)) * scale)
    sp = Tensor(rng.standard_normal((n_sp, D_COND)))
    np.testing.assert_array_equal(block.gated_ground(v1, sp).data, v1.data)


@settings(max_examples=50, deadline=None)
@given(st.floats(-15, 15))
def test_gate_bounded(gamma):
    with default_dtype(np.float64):
        block = _block()
        block.gamma.assign([gamma])
        assert abs(ops.tanh(block.gamma).item()) < 1.0


def test_gate_open_sees_spatial_tokens():
    block = _block()
    block.gamma.assign([1.0])
    v1 = _tokens(5, D_VIS, 1)
    a = block.gated_ground(v1, _tokens(3, D_COND, 2)).data
    b = block.gated_ground(v1, _tokens(3, D_COND, 3)).data
    assert not np.allclose(a, b)
    assert a.shape == v1.shape


def test_single_text_token_ignores_offsets():
    with default_dtype(np.float64):
        block = _block()
        rng = np.random.default_rng(0)
        _randomize_heads(block, rng)
        v2 = _tokens(7, D_VIS, 4)
        text = _tokens(1, D_COND, 5)
        a = block.deform_fuse(v2, text).data
        block.offset_head.weight.assign(rng.standard_normal(block.offset_head.weight.shape) * 3)
        b = block.deform_fuse(v2, text).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        value = text.data @ block.text_value.weight.data + block.text_value.bias.data
        expected = v2.data + value @ block.deform_out.weight.data + block.deform_out.bias.data
        np.testing.assert_allclose(a, expected, atol=1e-12)


def test_zero_heads_sample_midpoint_uniformly():
    with default_dtype(np.float64):
        block = _block(k_def=3)
        pos, w = block.sample_plan(_tokens(4, D_VIS, 0), n_text=6)
        np.testing.assert_array_equal(pos.data, np.full((4, 3), 2.5))
        np.testing.assert_allclose(w.data, 1.0 / 3.0, atol=1e-15)


def test_interpolation_at_one_and_a_quarter():
    with default_dtype(np.float64):
        vals = np.random.default_rng(0).standard_normal((1, 4, 3))
        out = ops.linear_interp_1d(vals, np.array([[1.25]])).data[0, 0]
        np.testing.assert_allclose(out, 0.75 * vals[0, 1] + 0.25 * vals[0, 2], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_positions_in_range_and_weights_normalized(n_text, seed):
    with default_dtype(np.float64):
        block = _block()
        _randomize_heads(block, np.random.default_rng(seed))
        pos, w = block.sample_plan(Tensor(np.random.default_rng(seed + 1).standard_normal((8, D_VIS)) * 4), n_text)
        assert np.all(pos.data >= 0) and np.all(pos.data <= n_text - 1)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


def test_stack_is_self_attention_at_init():
    block = _block()
    v = _tokens(12, D_VIS, 0)
    sp, text = _tokens(3, D_COND, 1), _tokens(5, D_COND, 2)
    np.testing.assert_array_equal(sfa_forward(block, v, sp, text).data, block.self_attend(v).data)


def test_token_count_preserved():
    block = _block()
    block.gamma.assign([0.5])
    _randomize_heads(block, np.random.default_rng(1))
    out = block(_tokens(10, D_VIS, 0), _tokens(4, D_COND, 1), _tokens(3, D_COND, 2))
    assert out.shape == (10, D_VIS)


def test_deform_requires_text():
    with pytest.raises(ShapeError):
        _block().deform_fuse(_tokens(2, D_VIS, 0), Tensor(np.zeros((1, D_COND, 1))))


def test_sfa_gradients_match_finite_differences():
    with default_dtype(np.float64):
        block = _block(5)
        rng = np.random.default_rng(6)
        _randomize_heads(block, rng)
        block.gamma.assign([0.4])
        v, sp, text = _tokens(7, D_VIS, 7), _tokens(3, D_COND, 8), _tokens(4, D_COND, 9)
        probe = rng.standard_normal((7, D_VIS))

        def loss():
            return ops.sum(ops.mul(ops.tanh(block(v, sp, text)), probe))

        names, params = zip(*block.named_parameters())
        results = check_gradients(loss, params, names=names, entries=4, directions=2)
        assert worst(results) < 1e-4, [(r.name, r.max_rel_error) for r in results]
        gamma = [r for r in results if r.name == "gamma"][0]
        assert gamma.max_rel_error < 1e-6


def test_gamma_gradient_at_zero_init():
    with default_dtype(np.float64):
        block = _block(2)
        v, sp, text = _tokens(5, D_VIS, 1), _tokens(2, D_COND, 2), _tokens(3, D_COND, 3)

        def loss():
            return ops.sum(ops.mul(block(v, sp, text), block(v, sp, text)))

        (res,) = check_gradients(loss, [block.gamma], names=["gamma"])
        assert res.max_rel_error < 1e-6
