"""Reparameterizable conv block: train-time branches, exact single-conv fusion.

Training form::

    y = reduce(spatial(expand(x))) + residual(x)

with ``expand`` 1x1 c->4c (no bias), ``spatial`` 3x3 4c->4c (pad 1),
``reduce`` 1x1 4c->c and ``residual`` 1x1 c->c. There is no activation
inside the block, so the whole thing is one affine map and collapses to a
single 3x3 c->c convolution.

Fusion arithmetic is carried out in float64 and cast back to the parameter
dtype.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import EAGER
from .errors import ContractError, ShapeError
from .tensor import ConvParams, get_dtype

EXPANSION = 4


@dataclass(frozen=True)
class RepConvParams:
    expand: ConvParams
    spatial: ConvParams
    reduce: ConvParams
    residual: ConvParams

    def __post_init__(self):
        c = self.residual.c_in
        e, s, r, res = self.expand, self.spatial, self.reduce, self.residual
        if e.bias is not None:
            raise ContractError("expand conv must be bias-free for exact fusion")
        if (e.k, s.k, r.k, res.k) != (1, 3, 1, 1):
            raise ShapeError("RepConv kernels must be (1x1, 3x3, 1x1, 1x1)")
        if (e.pad, s.pad, r.pad, res.pad) != (0, 1, 0, 0):
            raise ShapeError("RepConv padding must be (0, 1, 0, 0)")
        wide = EXPANSION * c
        chans = (e.c_in, e.c_out, s.c_in, s.c_out, r.c_in, r.c_out, res.c_out)
        if chans != (c, wide, wide, wide, wide, c, c):
            raise ShapeError(f"inconsistent RepConv channel arithmetic for c={c}: {chans}")

    @property
    def c(self) -> int:
        return self.residual.c_in

    def convs(self):
        return {"expand": self.expand, "spatial": self.spatial,
                "reduce": self.reduce, "residual": self.residual}

    def num_params(self) -> int:
        return sum(p.num_params() for p in self.convs().values())

    def astype(self, dtype) -> "RepConvParams":
        return RepConvParams(**{k: p.astype(dtype) for k, p in self.convs().items()})


def _he_uniform(rng, shape, dtype, gain=1.0):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = gain * np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def random_repconv(c: int, rng: np.random.Generator, dtype=None,
                   bias_scale: float = 0.0, gain: float = 1.0) -> RepConvParams:
    """He-uniform initialised block; biases drawn from U(-bias_scale, bias_scale)."""
    dtype = dtype or get_dtype()
    wide = EXPANSION * c

    def bias(n):
        return rng.uniform(-bias_scale, bias_scale, n).astype(dtype) if bias_scale else np.zeros(n, dtype)

    return RepConvParams(
        expand=ConvParams(_he_uniform(rng, (wide, c, 1, 1), dtype, gain), None, 0),
        spatial=ConvParams(_he_uniform(rng, (wide, wide, 3, 3), dtype, gain), bias(wide), 1),
        reduce=ConvParams(_he_uniform(rng, (c, wide, 1, 1), dtype, gain), bias(c), 0),
        residual=ConvParams(_he_uniform(rng, (c, c, 1, 1), dtype, gain), bias(c), 0),
    )


def zero_repconv(c: int, dtype=None) -> RepConvParams:
    dtype = dtype or get_dtype()
    wide = EXPANSION * c
    return RepConvParams(
        expand=ConvParams(np.zeros((wide, c, 1, 1), dtype), None, 0),
        spatial=ConvParams(np.zeros((wide, wide, 3, 3), dtype), np.zeros(wide, dtype), 1),
        reduce=ConvParams(np.zeros((c, wide, 1, 1), dtype), np.zeros(c, dtype), 0),
        residual=ConvParams(np.zeros((c, c, 1, 1), dtype), np.zeros(c, dtype), 0),
    )


def repconv_forward_branched(x, p: RepConvParams, ops=EAGER, name: str = "block"):
    """Training-time forward: reduce(spatial(expand(x))) + residual(x)."""
    c = ops.value(x).shape[1]
    if c != p.c:
        raise ShapeError(f"RepConv block expects {p.c} channels, got {c}")
    main = ops.conv2d(x, p.expand, f"{name}.expand")
    main = ops.conv2d(main, p.spatial, f"{name}.spatial")
    main = ops.conv2d(main, p.reduce, f"{name}.reduce")
    skip = ops.conv2d(x, p.residual, f"{name}.residual")
    return ops.add(main, skip)


def repconv_forward_fused(x, fused: ConvParams, ops=EAGER, name: str = "block"):
    return ops.conv2d(x, fused, name)


def _f64(a: Optional[np.ndarray]):
    return None if a is None else np.asarray(a, dtype=np.float64)


def fuse_1x1_into_3x3(first: ConvParams, second: ConvParams) -> ConvParams:
    """Fold a bias-free 1x1 conv into the 3x3 conv that follows it."""
    if first.k != 1 or second.k != 3:
        raise ShapeError("fuse_1x1_into_3x3 expects a 1x1 followed by a 3x3 conv")
    if first.bias is not None:
        raise ContractError("leading 1x1 conv must be bias-free to fold exactly across zero padding")
    if first.pad != 0:
        raise ContractError("leading 1x1 conv must be unpadded")
    if first.c_out != second.c_in:
        raise ShapeError(f"channel mismatch: {first.c_out} -> {second.c_in}")
    w = np.einsum("omuv,mi->oiuv", _f64(second.weight), _f64(first.weight)[:, :, 0, 0])
    dtype = second.dtype
    bias = None if second.bias is None else second.bias.copy()
    return ConvParams(w.astype(dtype), bias, second.pad)


def fuse_3x3_into_1x1(first: ConvParams, second: ConvParams) -> ConvParams:
    """Fold a trailing 1x1 conv into the 3x3 conv before it."""
    if first.k != 3 or second.k != 1:
        raise ShapeError("fuse_3x3_into_1x1 expects a 3x3 followed by a 1x1 conv")
    if second.pad != 0:
        raise ContractError("trailing 1x1 conv must be unpadded")
    if first.c_out != second.c_in:
        raise ShapeError(f"channel mismatch: {first.c_out} -> {second.c_in}")
    w2 = _f64(second.weight)[:, :, 0, 0]
    w = np.einsum("om,miuv->oiuv", w2, _f64(first.weight))
    bias = None
    if first.bias is not None or second.bias is not None:
        bias = np.zeros(second.c_out)
        if first.bias is not None:
            bias += w2 @ _f64(first.bias)
        if second.bias is not None:
            bias += _f64(second.bias)
    dtype = first.dtype
    return ConvParams(w.astype(dtype), None if bias is None else bias.astype(dtype), first.pad)


def embed_1x1_as_3x3(p: ConvParams) -> ConvParams:
    """Place a 1x1 kernel at the centre tap of a zero 3x3 kernel (pad 1)."""
    if p.k != 1:
        raise ContractError(f"expected a 1x1 conv, got kernel {p.k}")
    if p.pad != 0:
        raise ContractError("only unpadded 1x1 convs embed exactly")
    w = np.zeros((p.c_out, p.c_in, 3, 3), dtype=p.dtype)
    w[:, :, 1, 1] = p.weight[:, :, 0, 0]
    return ConvParams(w, None if p.bias is None else p.bias.copy(), 1)


def add_kernels(a: ConvParams, b: ConvParams) -> ConvParams:
    if a.weight.shape != b.weight.shape or a.pad != b.pad:
        raise ShapeError(f"cannot add kernels {a.weight.shape}/pad {a.pad} and {b.weight.shape}/pad {b.pad}")
    dtype = a.dtype
    w = (_f64(a.weight) + _f64(b.weight)).astype(dtype)
    if a.bias is None and b.bias is None:
        return ConvParams(w, None, a.pad)
    bias = np.zeros(a.c_out)
    for term in (a.bias, b.bias):
        if term is not None:
            bias += _f64(term)
    return ConvParams(w, bias.astype(dtype), a.pad)


def fuse_repconv(p: RepConvParams) -> ConvParams:
    """Collapse a branched block into one 3x3 c->c conv with bias."""
    # Intermediate products stay float64 so the result is rounded once.
    as64 = p.astype(np.float64)
    main = fuse_3x3_into_1x1(fuse_1x1_into_3x3(as64.expand, as64.spatial), as64.reduce)
    fused = add_kernels(main, embed_1x1_as_3x3(as64.residual))
    if fused.bias is None:
        fused = ConvParams(fused.weight, np.zeros(fused.c_out), 1)
    return fused.astype(p.residual.dtype)


def as_repconv(fused: ConvParams) -> RepConvParams:
    """Express a fused 3x3 c->c conv as a branched block with the same map.

    The expand conv injects x into the first c of the 4c wide channels, the
    spatial conv applies ``fused`` there, and the reduce conv reads them back;
    the residual branch is zero.
    """
    if fused.k != 3 or fused.c_in != fused.c_out or fused.pad != 1:
        raise ShapeError("as_repconv expects a 3x3 c->c conv with pad 1")
    c, dtype = fused.c_in, fused.dtype
    wide = EXPANSION * c
    expand = np.zeros((wide, c, 1, 1), dtype)
    expand[:c, :, 0, 0] = np.eye(c, dtype=dtype)
    spatial = np.zeros((wide, wide, 3, 3), dtype)
    spatial[:c, :c] = fused.weight
    reduce = np.zeros((c, wide, 1, 1), dtype)
    reduce[:, :c, 0, 0] = np.eye(c, dtype=dtype)
    bias = np.zeros(c, dtype) if fused.bias is None else fused.bias
    return RepConvParams(
        expand=ConvParams(expand, None, 0),
        spatial=ConvParams(spatial, np.zeros(wide, dtype), 1),
        reduce=ConvParams(reduce, bias.copy(), 0),
        residual=ConvParams(np.zeros((c, c, 1, 1), dtype), np.zeros(c, dtype), 0),
    )


def block_macs_per_pixel(c: int, fused: bool) -> int:
    """Multiply-accumulates per output pixel of one block."""
    if fused:
        return 9 * c * c
    wide = EXPANSION * c
    return wide * c + 9 * wide * wide + c * wide + c * c
