# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv2d kernels.

Loop order keeps the innermost run contiguous in memory with the weight
hoisted, and valid output ranges are precomputed so the hot loops carry
no bounds checks.  Same signatures as `segmoe._pykernels`.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest i >= 0 with i*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t limit,
                           Py_ssize_t count) noexcept nogil:
    # one past the largest i < count with i*stride + off < limit
    cdef Py_ssize_t h = (limit - 1 - off) // stride + 1
    if h > count:
        h = count
    if h < 0:
        h = 0
    return h


def conv2d_forward(object x_in, object w_in, int stride, int padding):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t f = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - kw) // stride + 1
    y = np.zeros((n, f, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t bi, fi, ci, a, b, i, j, u, uoff, voff, i0, i1, j0, j1
    cdef double coef
    cdef const double* xrow
    cdef double* yrow
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for a in range(kh):
                    uoff = a - padding
                    i0 = _lo(uoff, stride)
                    i1 = _hi(uoff, stride, h, oh)
                    for b in range(kw):
                        voff = b - padding
                        j0 = _lo(voff, stride)
                        j1 = _hi(voff, stride, w, ow)
                        for fi in range(f):
                            coef = wv[fi, ci, a, b]
                            if coef == 0.0:
                                continue
                            for i in range(i0, i1):
                                u = i * stride + uoff
                                if stride == 1:
                                    xrow = &xv[bi, ci, u, 0]
                                    yrow = &yv[bi, fi, i, 0]
                                    for j in range(j0, j1):
                                        yrow[j] += coef * xrow[j + voff]
                                else:
                                    for j in range(j0, j1):
                                        yv[bi, fi, i, j] += coef * xv[bi, ci, u, j * stride + voff]
    return y


def conv2d_backward_input(object dy_in, object w_in, int stride, int padding,
                          int h, int w):
    cdef double[:, :, :, ::1] dyv = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef Py_ssize_t n = dyv.shape[0], f = dyv.shape[1], oh = dyv.shape[2], ow = dyv.shape[3]
    cdef Py_ssize_t c = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dxv = dx
    cdef Py_ssize_t bi, fi, ci, a, b, i, j, u, uoff, voff, i0, i1, j0, j1
    cdef double coef
    cdef const double* gr
    cdef double* dxrow
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for a in range(kh):
                    uoff = a - padding
                    i0 = _lo(uoff, stride)
                    i1 = _hi(uoff, stride, h, oh)
                    for b in range(kw):
                        voff = b - padding
                        j0 = _lo(voff, stride)
                        j1 = _hi(voff, stride, w, ow)
                        for fi in range(f):
                            coef = wv[fi, ci, a, b]
                            if coef == 0.0:
                                continue
                            for i in range(i0, i1):
                                u = i * stride + uoff
                                if stride == 1:
                                    gr = &dyv[bi, fi, i, 0]
                                    dxrow = &dxv[bi, ci, u, 0]
                                    for j in range(j0, j1):
                                        dxrow[j + voff] += coef * gr[j]
                                else:
                                    for j in range(j0, j1):
                                        dxv[bi, ci, u, j * stride + voff] += coef * dyv[bi, fi, i, j]
    return dx


def conv2d_backward_weight(object dy_in, object x_in, int kh, int kw,
                           int stride, int padding):
    cdef double[:, :, :, ::1] dyv = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t n = dyv.shape[0], f = dyv.shape[1], oh = dyv.shape[2], ow = dyv.shape[3]
    cdef Py_ssize_t c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    dw = np.zeros((f, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dwv = dw
    cdef Py_ssize_t bi, fi, ci, a, b, i, j, u, uoff, voff, i0, i1, j0, j1
    cdef double acc
    cdef const double* gr
    cdef const double* xrow
    with nogil:
        for bi in range(n):
            for ci in range(c):
                for a in range(kh):
                    uoff = a - padding
                    i0 = _lo(uoff, stride)
                    i1 = _hi(uoff, stride, h, oh)
                    for b in range(kw):
                        voff = b - padding
                        j0 = _lo(voff, stride)
                        j1 = _hi(voff, stride, w, ow)
                        for fi in range(f):
                            acc = 0.0
                            for i in range(i0, i1):
                                u = i * stride + uoff
                                if stride == 1:
                                    gr = &dyv[bi, fi, i, 0]
                                    xrow = &xv[bi, ci, u, 0]
                                    for j in range(j0, j1):
                                        acc += gr[j] * xrow[j + voff]
                                else:
                                    for j in range(j0, j1):
                                        acc += dyv[bi, fi, i, j] * xv[bi, ci, u, j * stride + voff]
                            dwv[fi, ci, a, b] += acc
    return dw
