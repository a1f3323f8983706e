# cython: language_level=3
"""Compiled convolution kernels.

All three kernels use the same "wide row" trick: the zero-padded input plane
is flattened to ``hp * wp`` elements (plus ``k - 1`` slack), and the output is
computed on a ``ho x wp`` grid. Every tap (u, v) is then a constant offset
``u * wp + v`` into the flat plane, so each tap is a single strided GEMM with
no im2col copy. Columns ``wo..wp-1`` of the wide output are discarded.
Unpadded 1x1 convs skip the plane entirely: one GEMM per batch item.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                          real* a, int lda, real* b, int ldb,
                          real beta, real* c, int ldc) noexcept nogil:
    # Row-major C[m,n] = op(A) @ op(B) + beta*C via column-major BLAS on
    # the transposed problem: C^T = op(B)^T @ op(A)^T.
    cdef char transa = b'T' if tb else b'N'
    cdef char transb = b'T' if ta else b'N'
    cdef real alpha = 1.0
    if real is float:
        sgemm(&transa, &transb, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(&transa, &transb, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, int pad):
    """Bias-free stride-1 zero-padded convolution; returns (n, co, ho, wo)."""
    cdef int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = w.shape[0], k = w.shape[2]
    cdef int hp = h + 2 * pad, wp = wd + 2 * pad
    cdef int ho = hp - k + 1, wo = wp - k + 1
    cdef int plane = hp * wp + k - 1
    cdef int length = ho * wp
    cdef int b, i, o, y, xx, t, u, v
    dtype = np.float32 if real is float else np.float64

    out_arr = np.empty((n, co, ho, wo), dtype=dtype)
    if n == 0 or co == 0 or ho <= 0 or wo <= 0:
        return out_arr
    if ci == 0:
        out_arr.fill(0)
        return out_arr
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, :, :, ::1] wv = w
    if k == 1 and pad == 0:
        with nogil:
            for b in range(n):
                _gemm_rm(False, False, co, h * wd, ci, &wv[0, 0, 0, 0], ci,
                         &x[b, 0, 0, 0], h * wd, 0.0, &out[b, 0, 0, 0], h * wd)
        return out_arr
    cdef real[:, :, ::1] taps = np.ascontiguousarray(
        np.transpose(np.asarray(w), (2, 3, 0, 1))).reshape(k * k, co, ci)
    cdef real[:, ::1] xpad = np.zeros((ci, plane), dtype=dtype)
    cdef real[:, ::1] wide = np.empty((co, length), dtype=dtype)

    with nogil:
        for b in range(n):
            for i in range(ci):
                for y in range(h):
                    for xx in range(wd):
                        xpad[i, (y + pad) * wp + xx + pad] = x[b, i, y, xx]
            for t in range(k * k):
                u = t // k
                v = t % k
                _gemm_rm(False, False, co, length, ci,
                         &taps[t, 0, 0], ci, &xpad[0, u * wp + v], plane,
                         0.0 if t == 0 else 1.0, &wide[0, 0], length)
            for o in range(co):
                for y in range(ho):
                    for xx in range(wo):
                        out[b, o, y, xx] = wide[o, y * wp + xx]
    return out_arr


def conv2d_backward_input(real[:, :, :, ::1] g, real[:, :, :, ::1] w,
                          int pad, int h, int wd):
    """Gradient of the input of conv2d_forward given output grad ``g``."""
    cdef int n = g.shape[0], co = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef int ci = w.shape[1], k = w.shape[2]
    cdef int hp = h + 2 * pad, wp = wd + 2 * pad
    cdef int plane = hp * wp + k - 1
    cdef int length = ho * wp
    cdef int b, i, o, y, xx, t, u, v
    dtype = np.float32 if real is float else np.float64

    gx_arr = np.zeros((n, ci, h, wd), dtype=dtype)
    if n == 0 or ci == 0 or h == 0 or wd == 0 or co == 0 or ho <= 0 or wo <= 0:
        return gx_arr
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] wv = w
    if k == 1 and pad == 0:
        with nogil:
            for b in range(n):
                _gemm_rm(True, False, ci, h * wd, co, &wv[0, 0, 0, 0], ci,
                         &g[b, 0, 0, 0], h * wd, 0.0, &gx[b, 0, 0, 0], h * wd)
        return gx_arr
    cdef real[:, :, ::1] taps = np.ascontiguousarray(
        np.transpose(np.asarray(w), (2, 3, 0, 1))).reshape(k * k, co, ci)
    cdef real[:, ::1] gpad = np.empty((ci, plane), dtype=dtype)
    cdef real[:, ::1] wide = np.zeros((co, length), dtype=dtype)

    with nogil:
        for b in range(n):
            for o in range(co):
                for y in range(ho):
                    for xx in range(wo):
                        wide[o, y * wp + xx] = g[b, o, y, xx]
            gpad[:, :] = 0
            for t in range(k * k):
                u = t // k
                v = t % k
                _gemm_rm(True, False, ci, length, co,
                         &taps[t, 0, 0], ci, &wide[0, 0], length,
                         1.0, &gpad[0, u * wp + v], plane)
            for i in range(ci):
                for y in range(h):
                    for xx in range(wd):
                        gx[b, i, y, xx] = gpad[i, (y + pad) * wp + xx + pad]
    return gx_arr


def conv2d_backward_weight(real[:, :, :, ::1] g, real[:, :, :, ::1] x,
                           int pad, int k):
    """Gradient of the (co, ci, k, k) weight of conv2d_forward."""
    cdef int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef int hp = h + 2 * pad, wp = wd + 2 * pad
    cdef int plane = hp * wp + k - 1
    cdef int length = ho * wp
    cdef int b, i, o, y, xx, t, u, v
    dtype = np.float32 if real is float else np.float64

    gtaps_arr = np.zeros((k * k, co, ci), dtype=dtype)
    if n == 0 or ci == 0 or co == 0 or ho <= 0 or wo <= 0:
        return np.zeros((co, ci, k, k), dtype=dtype)
    cdef real[:, :, ::1] gtaps = gtaps_arr
    if k == 1 and pad == 0:
        with nogil:
            for b in range(n):
                _gemm_rm(False, True, co, ci, h * wd, &g[b, 0, 0, 0], h * wd,
                         &x[b, 0, 0, 0], h * wd, 1.0, &gtaps[0, 0, 0], ci)
        return gtaps_arr.reshape(co, ci, 1, 1)
    cdef real[:, ::1] xpad = np.zeros((ci, plane), dtype=dtype)
    cdef real[:, ::1] wide = np.zeros((co, length), dtype=dtype)

    with nogil:
        for b in range(n):
            for i in range(ci):
                for y in range(h):
                    for xx in range(wd):
                        xpad[i, (y + pad) * wp + xx + pad] = x[b, i, y, xx]
            # Slack columns of ``wide`` stay zero, so garbage reads of the
            # wide input rows never reach the weight gradient.
            for o in range(co):
                for y in range(ho):
                    for xx in range(wo):
                        wide[o, y * wp + xx] = g[b, o, y, xx]
            for t in range(k * k):
                u = t // k
                v = t % k
                _gemm_rm(False, True, co, ci, length,
                         &wide[0, 0], length, &xpad[0, u * wp + v], plane,
                         1.0, &gtaps[t, 0, 0], ci)
    return np.ascontiguousarray(gtaps_arr.reshape(k, k, co, ci).transpose(2, 3, 0, 1))
