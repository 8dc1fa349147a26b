# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for small-batch inference.

Semantics mirror the numpy backend: float64 accumulation, float32 outputs,
reduction order (channel, ky, kx) for conv and plain input order for dense.
Strict IEEE754 behaviour is required (no fast-math): corrupted parameters
routinely put inf/NaN into these loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, NAN

cnp.import_array()


def conv2d(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
           bias, stride, padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (ww + 2 * pw - kw) // sw + 1
    out_arr = np.empty((n, o, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef const float[::1] b
    cdef bint has_bias = bias is not None
    if has_bias:
        b = bias
    cdef Py_ssize_t i, j, oy, ox, cc, ky, kx, iy, ix
    cdef double acc
    cdef double bj
    for i in range(n):
        for j in range(o):
            bj = b[j] if has_bias else 0.0
            for oy in range(oh):
                for ox in range(ow):
                    acc = bj
                    for cc in range(c):
                        for ky in range(kh):
                            iy = oy * sh + ky - ph
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * sw + kx - pw
                                if ix < 0 or ix >= ww:
                                    continue
                                acc += (<double> x[i, cc, iy, ix]) * (<double> w[j, cc, ky, kx])
                    out[i, j, oy, ox] = <float> acc
    return out_arr


def fully_connected(const float[:, ::1] x, const float[:, ::1] w, bias):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], o = w.shape[0]
    out_arr = np.empty((n, o), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef const float[::1] b
    cdef bint has_bias = bias is not None
    if has_bias:
        b = bias
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for j in range(o):
            acc = b[j] if has_bias else 0.0
            for k in range(d):
                acc += (<double> x[i, k]) * (<double> w[j, k])
            out[i, j] = <float> acc
    return out_arr


def maxpool2d(const float[:, :, :, ::1] x, pool, stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = pool[0], kw = pool[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t oh = (h - kh) // sh + 1
    cdef Py_ssize_t ow = (w - kw) // sw + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, cc, oy, ox, ky, kx
    cdef float best, v
    cdef float neg_inf = <float> (-INFINITY)
    cdef float nan_val = <float> NAN
    cdef bint saw_nan
    for i in range(n):
        for cc in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = neg_inf
                    saw_nan = False
                    for ky in range(kh):
                        for kx in range(kw):
                            v = x[i, cc, oy * sh + ky, ox * sw + kx]
                            if v != v:
                                saw_nan = True
                            elif v > best:
                                best = v
                    # NaN anywhere in the window poisons the output, matching numpy max
                    out[i, cc, oy, ox] = nan_val if saw_nan else best
    return out_arr
