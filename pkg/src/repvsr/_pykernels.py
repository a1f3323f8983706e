"""Pure-numpy convolution kernels (fallback for the compiled ``_ckernels``).

Same signatures and semantics as the compiled module: bias-free, stride 1,
zero padding, (n, c, h, w) layout. Forward and weight-gradient go through an
im2col view and one ``tensordot``; the input gradient scatters per tap.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, pad):
    n, _, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    if n == 0 or co == 0 or ho <= 0 or wo <= 0 or ci == 0:
        return np.zeros((n, co, max(ho, 0), max(wo, 0)), dtype=x.dtype)
    if k == 1 and pad == 0:
        out = np.matmul(w[:, :, 0, 0], x.reshape(n, ci, h * wd))
        return out.reshape(n, co, h, wd)
    cols = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(g, w, pad, h, wd):
    n, co, ho, wo = g.shape
    _, ci, k, _ = w.shape
    if n == 0 or ci == 0 or h == 0 or wd == 0 or co == 0:
        return np.zeros((n, ci, h, wd), dtype=g.dtype)
    if k == 1 and pad == 0:
        gx = np.matmul(w[:, :, 0, 0].T, g.reshape(n, co, ho * wo))
        return gx.reshape(n, ci, h, wd)
    gpad = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for u in range(k):
        for v in range(k):
            contrib = np.tensordot(w[:, :, u, v], g, axes=([0], [1]))  # (ci, n, ho, wo)
            gpad[:, :, u:u + ho, v:v + wo] += contrib.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gpad[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight(g, x, pad, k):
    n, ci, h, wd = x.shape
    co = g.shape[1]
    if n == 0 or ci == 0 or co == 0:
        return np.zeros((co, ci, k, k), dtype=x.dtype)
    if k == 1 and pad == 0:
        gw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))
        return gw.reshape(co, ci, 1, 1)
    cols = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (co, ci, k, k)
    return np.ascontiguousarray(gw)
