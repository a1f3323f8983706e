"""Dense (n, c, h, w) tensors and the elementary differentiable operations.

Tensors are plain contiguous numpy arrays of rank 4. The engine precision
(``f32`` or ``f64``) governs the dtype of newly created parameters and
loaded data; every op preserves the dtype of its inputs and refuses to mix.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backend
from .errors import ContractError, ShapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}
_precision = "f32"


def get_precision() -> str:
    return _precision


def set_precision(mode: str) -> None:
    global _precision
    if mode not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {mode!r}")
    _precision = mode


def get_dtype():
    return PRECISIONS[_precision]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the engine precision."""
    previous = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def as_tensor4(a, dtype=None) -> np.ndarray:
    """Validate/convert ``a`` to a contiguous rank-4 array of the engine dtype."""
    arr = np.ascontiguousarray(a, dtype=dtype or get_dtype())
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    return arr


def zeros(dims, dtype=None) -> np.ndarray:
    return np.zeros(dims, dtype=dtype or get_dtype())


@dataclass(frozen=True)
class ConvParams:
    """Weights (c_out, c_in, k, k), optional bias (c_out,), zero padding.

    Stride is always 1.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    pad: int = 0

    def __post_init__(self):
        w = np.ascontiguousarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {w.shape[2]}")
        if self.pad < 0:
            raise ShapeError(f"pad must be >= 0, got {self.pad}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=w.dtype)
            if b.shape != (w.shape[0],):
                raise ShapeError(f"bias shape {b.shape} does not match c_out={w.shape[0]}")
            object.__setattr__(self, "bias", b)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def dtype(self):
        return self.weight.dtype

    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def astype(self, dtype) -> "ConvParams":
        bias = None if self.bias is None else self.bias.astype(dtype)
        return ConvParams(self.weight.astype(dtype), bias, self.pad)


def identity_1x1(c: int, dtype=None, bias: bool = False) -> ConvParams:
    dtype = dtype or get_dtype()
    w = np.eye(c, dtype=dtype).reshape(c, c, 1, 1)
    return ConvParams(w, np.zeros(c, dtype=dtype) if bias else None, 0)


def _check_dtype(x: np.ndarray, params: ConvParams) -> None:
    if x.dtype != params.dtype:
        raise ContractError(f"dtype mismatch: input {x.dtype}, weights {params.dtype}")


def conv_out_dims(dims, params: ConvParams):
    n, c, h, w = dims
    if c != params.c_in:
        raise ShapeError(f"conv expects {params.c_in} input channels, got {c}")
    ho = h + 2 * params.pad - params.k + 1
    wo = w + 2 * params.pad - params.k + 1
    if ho < 0 or wo < 0:
        raise ShapeError(f"conv output extent would be negative for input {dims}")
    return (n, params.c_out, ho, wo)


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-padded stride-1 convolution with optional bias."""
    out_dims = conv_out_dims(x.shape, params)
    _check_dtype(x, params)
    if 0 in out_dims:
        out = np.zeros(out_dims, dtype=x.dtype)
    else:
        out = backend.kernels.conv2d_forward(np.ascontiguousarray(x), params.weight, params.pad)
    if params.bias is not None and out.size:
        out += params.bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return (grad_input, grad_weight, grad_bias) for ``conv2d(x, params)``.

    ``grad_bias`` is None when the conv has no bias.
    """
    expected = conv_out_dims(x.shape, params)
    if tuple(grad_out.shape) != tuple(expected):
        raise ShapeError(f"grad_out dims {grad_out.shape} do not match forward output {expected}")
    g = np.ascontiguousarray(grad_out, dtype=x.dtype)
    k, pad = params.k, params.pad
    if g.size == 0 or x.size == 0:
        gx = np.zeros_like(x)
        gw = np.zeros_like(params.weight)
    else:
        gx = backend.kernels.conv2d_backward_input(g, params.weight, pad, x.shape[2], x.shape[3])
        gw = backend.kernels.conv2d_backward_weight(g, np.ascontiguousarray(x), pad, k)
    gb = None if params.bias is None else g.sum(axis=(0, 2, 3))
    return gx, gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}: batch/spatial mismatch")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, boundary: int):
    """Backward of concat: split at the recorded channel boundary."""
    return np.ascontiguousarray(grad[:, :boundary]), np.ascontiguousarray(grad[:, boundary:])


def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange (n, c, h, w) into (n, c/r², h·r, w·r).

    Channel ``o·r² + dy·r + dx`` lands at spatial offset (dy, dx) of output
    channel ``o``.
    """
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2={r * r}")
    out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, c // (r * r), h * r, w * r))


def depth_to_space_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = grad_out.shape
    h, w = hr // r, wr // r
    g = grad_out.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(g.reshape(n, c * r * r, h, w))


def nearest_upsample(x: np.ndarray, r: int) -> np.ndarray:
    if r < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {r}")
    return np.ascontiguousarray(np.repeat(np.repeat(x, r, axis=2), r, axis=3))


def nearest_upsample_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = grad_out.shape
    return grad_out.reshape(n, c, hr // r, r, wr // r, r).sum(axis=(3, 5))
