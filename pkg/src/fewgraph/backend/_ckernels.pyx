# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy hot kernels.

Same contracts as numpy_kernels: float64, C-contiguous, 3x3 kernels with zero
padding 1, and the first-maximum-in-row-major-window tie rule for pooling.
Loops are ordered so the innermost index walks contiguous memory.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv3x3_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] k):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t f = k.shape[0]
    xp_arr = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    xp_arr[:, :, 1:h + 1, 1:w + 1] = np.asarray(x)
    out_arr = np.zeros((b, f, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, jf, ic, di, dj, i, j
    cdef double kv
    for ib in range(b):
        for jf in range(f):
            for ic in range(c):
                for di in range(3):
                    for dj in range(3):
                        kv = k[jf, ic, di, dj]
                        for i in range(h):
                            for j in range(w):
                                out[ib, jf, i, j] += kv * xp[ib, ic, i + di, j + dj]
    return out_arr


def conv3x3_grad_input(double[:, :, :, ::1] gout, double[:, :, :, ::1] k):
    cdef Py_ssize_t b = gout.shape[0], f = gout.shape[1], h = gout.shape[2], w = gout.shape[3]
    cdef Py_ssize_t c = k.shape[1]
    gxp_arr = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t ib, jf, ic, di, dj, i, j
    cdef double kv
    for ib in range(b):
        for ic in range(c):
            for jf in range(f):
                for di in range(3):
                    for dj in range(3):
                        kv = k[jf, ic, di, dj]
                        for i in range(h):
                            for j in range(w):
                                gxp[ib, ic, i + di, j + dj] += kv * gout[ib, jf, i, j]
    return np.ascontiguousarray(gxp_arr[:, :, 1:h + 1, 1:w + 1])


def conv3x3_grad_kernel(double[:, :, :, ::1] gout, double[:, :, :, ::1] x):
    cdef Py_ssize_t b = gout.shape[0], f = gout.shape[1], h = gout.shape[2], w = gout.shape[3]
    cdef Py_ssize_t c = x.shape[1]
    xp_arr = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    xp_arr[:, :, 1:h + 1, 1:w + 1] = np.asarray(x)
    gk_arr = np.zeros((f, c, 3, 3), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t ib, jf, ic, di, dj, i, j
    cdef double acc
    for ib in range(b):
        for jf in range(f):
            for ic in range(c):
                for di in range(3):
                    for dj in range(3):
                        acc = 0.0
                        for i in range(h):
                            for j in range(w):
                                acc += gout[ib, jf, i, j] * xp[ib, ic, i + di, j + dj]
                        gk[jf, ic, di, dj] += acc
    return gk_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2
    out_arr = np.empty((b, c, h2, w2), dtype=np.float64)
    arg_arr = np.zeros((b, c, h2, w2), dtype=np.uint8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t ib, ic, i, j, di, dj
    cdef double best, v
    cdef unsigned char code
    for ib in range(b):
        for ic in range(c):
            for i in range(h2):
                for j in range(w2):
                    best = x[ib, ic, 2 * i, 2 * j]
                    code = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[ib, ic, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                                code = <unsigned char> (2 * di + dj)
                    out[ib, ic, i, j] = best
                    arg[ib, ic, i, j] = code
    return out_arr, arg_arr


def maxpool2_backward(double[:, :, :, ::1] gout, unsigned char[:, :, :, ::1] arg,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = gout.shape[0], c = gout.shape[1], h2 = gout.shape[2], w2 = gout.shape[3]
    gx_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t ib, ic, i, j
    cdef unsigned char code
    for ib in range(b):
        for ic in range(c):
            for i in range(h2):
                for j in range(w2):
                    code = arg[ib, ic, i, j]
                    gx[ib, ic, 2 * i + code // 2, 2 * j + code % 2] += gout[ib, ic, i, j]
    return gx_arr
