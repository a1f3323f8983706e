import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repvsr import repconv as rc
from repvsr import tensor as T
from repvsr.errors import ContractError, ShapeError


def _block(c, seed, dtype=np.float64, bias_scale=0.3):
    return rc.random_repconv(c, np.random.default_rng(seed), dtype, bias_scale=bias_scale)


def _conv(rng, co, ci, k, bias=True, dtype=np.float64):
    b = rng.standard_normal(co).astype(dtype) if bias else None
    w = rng.standard_normal((co, ci, k, k)) / np.sqrt(ci * k * k)
    return T.ConvParams(w.astype(dtype), b, k // 2)


def test_branched_is_op_composition(rng):
    p = _block(3, 0)
    x = rng.standard_normal((2, 3, 5, 4))
    ref = (T.conv2d(T.conv2d(T.conv2d(x, p.expand), p.spatial), p.reduce) + T.conv2d(x, p.residual))
    np.testing.assert_array_equal(rc.repconv_forward_branched(x, p), ref)


def test_zero_and_identity_blocks(rng):
    x = rng.standard_normal((1, 4, 3, 3))
    z = rc.zero_repconv(4, np.float64)
    assert not rc.repconv_forward_branched(x, z).any()
    ident = dataclasses.replace(z, residual=T.identity_1x1(4, np.float64, bias=True))
    np.testing.assert_array_equal(rc.repconv_forward_branched(x, ident), x)
    dirac = rc.fuse_repconv(ident)
    expected = np.zeros((4, 4, 3, 3))
    expected[:, :, 1, 1] = np.eye(4)
    np.testing.assert_array_equal(dirac.weight, expected)
    assert not dirac.bias.any()


def test_params_validation():
    p = _block(2, 0)
    with pytest.raises(ContractError):
        dataclasses.replace(p, expand=T.ConvParams(p.expand.weight, np.zeros(8), 0))
    with pytest.raises(ShapeError):
        dataclasses.replace(p, residual=T.identity_1x1(3, np.float64))
    with pytest.raises(ShapeError):
        rc.repconv_forward_branched(np.zeros((1, 3, 2, 2)), p)
    assert p.num_params() == 153 * 4 + 6 * 2  # 153c^2 weights; spatial 4c + reduce c + residual c biases


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_fuse_1x1_into_3x3(rng, dtype, tol):
    first = _conv(rng, 6, 3, 1, bias=False, dtype=dtype)
    first = T.ConvParams(first.weight, None, 0)
    second = _conv(rng, 4, 6, 3, dtype=dtype)
    fused = rc.fuse_1x1_into_3x3(first, second)
    for dims in [(2, 3, 6, 5), (1, 3, 1, 1), (1, 3, 2, 2), (1, 3, 3, 1)]:
        x = rng.standard_normal(dims).astype(dtype)
        assert np.abs(T.conv2d(T.conv2d(x, first), second) - T.conv2d(x, fused)).max() <= tol
    np.testing.assert_array_equal(rc.fuse_1x1_into_3x3(T.identity_1x1(6, dtype), second).weight, second.weight)
    zero = rc.fuse_1x1_into_3x3(first, T.ConvParams(np.zeros_like(second.weight), second.bias, 1))
    assert not zero.weight.any()
    np.testing.assert_array_equal(zero.bias, second.bias)
    with pytest.raises(ContractError):
        rc.fuse_1x1_into_3x3(T.ConvParams(first.weight, np.ones(6, dtype), 0), second)
    with pytest.raises(ShapeError):
        rc.fuse_1x1_into_3x3(T.identity_1x1(5, dtype), second)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_fuse_3x3_into_1x1(rng, dtype, tol):
    first = _conv(rng, 6, 3, 3, dtype=dtype)
    second = _conv(rng, 4, 6, 1, dtype=dtype)
    second = T.ConvParams(second.weight, second.bias, 0)
    fused = rc.fuse_3x3_into_1x1(first, second)
    for dims in [(2, 3, 6, 5), (1, 3, 1, 1), (1, 3, 2, 2)]:
        x = rng.standard_normal(dims).astype(dtype)
        assert np.abs(T.conv2d(T.conv2d(x, first), second) - T.conv2d(x, fused)).max() <= tol
    same = rc.fuse_3x3_into_1x1(first, T.identity_1x1(6, dtype, bias=True))
    np.testing.assert_allclose(same.weight, first.weight, rtol=1e-7)
    np.testing.assert_allclose(same.bias, first.bias, rtol=1e-7)
    nobias = rc.fuse_3x3_into_1x1(T.ConvParams(first.weight, None, 1), T.ConvParams(second.weight, None, 0))
    assert nobias.bias is None or not nobias.bias.any()
    with pytest.raises(ShapeError):
        rc.fuse_3x3_into_1x1(first, T.identity_1x1(5, dtype))


def test_embed_1x1_as_3x3(rng):
    p = _conv(rng, 3, 5, 1)
    p = T.ConvParams(p.weight, p.bias, 0)
    e = rc.embed_1x1_as_3x3(p)
    x = rng.standard_normal((1, 5, 4, 3))
    assert np.abs(T.conv2d(x, p) - T.conv2d(x, e)).max() <= 1e-6
    z = rc.embed_1x1_as_3x3(T.ConvParams(np.zeros((2, 2, 1, 1)), None, 0))
    assert z.weight.shape == (2, 2, 3, 3) and not z.weight.any()
    with pytest.raises(ContractError):
        rc.embed_1x1_as_3x3(_conv(rng, 2, 2, 3))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.sampled_from([1, 2, 4, 8]),
       h=st.integers(1, 5), w=st.integers(1, 5), f64=st.booleans())
def test_fusion_exact_property(seed, c, h, w, f64):
    dtype, tol = (np.float64, 1e-10) if f64 else (np.float32, 1e-5)
    p = _block(c, seed, dtype)
    x = np.random.default_rng(seed + 1).standard_normal((1, c, h, w)).astype(dtype)
    fused = rc.fuse_repconv(p)
    assert fused.dtype == dtype and fused.k == 3 and fused.bias is not None
    diff = np.abs(rc.repconv_forward_branched(x, p) - rc.repconv_forward_fused(x, fused)).max()
    assert diff <= tol


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.sampled_from([1, 3, 4]))
def test_fusion_idempotent(seed, c):
    fused = rc.fuse_repconv(_block(c, seed))
    again = rc.fuse_repconv(rc.as_repconv(fused))
    np.testing.assert_allclose(again.weight, fused.weight, rtol=0, atol=1e-12)
    np.testing.assert_allclose(again.bias, fused.bias, rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.sampled_from([1, 2, 4]))
def test_fusion_linear_in_output_branches(seed, c):
    """With expand/spatial shared, fusion is linear in (reduce, residual)."""
    a, b = _block(c, seed), _block(c, seed + 1)
    b = dataclasses.replace(b, expand=a.expand, spatial=a.spatial)
    summed = dataclasses.replace(
        a, reduce=rc.add_kernels(a.reduce, b.reduce), residual=rc.add_kernels(a.residual, b.residual))
    lhs = rc.fuse_repconv(summed)
    rhs = rc.add_kernels(rc.fuse_repconv(a), rc.fuse_repconv(b))
    np.testing.assert_allclose(lhs.weight, rhs.weight, atol=1e-10)
    np.testing.assert_allclose(lhs.bias, rhs.bias, atol=1e-10)


def test_fusion_not_linear_in_all_params_jointly():
    # The main path is a product of three kernels, so summing whole blocks
    # produces cross terms.
    a, b = _block(2, 0), _block(2, 1)
    summed = rc.RepConvParams(**{k: rc.add_kernels(pa, b.convs()[k]) for k, pa in a.convs().items()})
    lhs = rc.fuse_repconv(summed).weight
    rhs = rc.fuse_repconv(a).weight + rc.fuse_repconv(b).weight
    assert np.abs(lhs - rhs).max() > 1e-3


@pytest.mark.parametrize("c", [1, 4, 8, 16, 33])
def test_block_macs_ratio(c):
    assert rc.block_macs_per_pixel(c, True) == 9 * c * c
    assert rc.block_macs_per_pixel(c, False) == 153 * c * c
    assert rc.block_macs_per_pixel(c, False) / rc.block_macs_per_pixel(c, True) == 17
