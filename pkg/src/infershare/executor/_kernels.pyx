# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled layer kernels.

Loop order and accumulation order match ``_fallback`` exactly so both
backends produce bit-identical results for the multiply/add kernels. Each
kernel returns ``(output, ops)`` where ``ops`` counts the arithmetic
operations actually performed.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()

NAME = "cython"


def conv2d(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[::1] b, int stride, int pad):
    cdef Py_ssize_t n_batch = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.empty((n_batch, cout, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, co, oh, ow, ci, i, j, ih, iw
    cdef double acc, v
    cdef long long ops = 0
    for n in range(n_batch):
        for co in range(cout):
            for oh in range(ho):
                for ow in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for i in range(kh):
                            ih = oh * stride + i - pad
                            for j in range(kw):
                                iw = ow * stride + j - pad
                                if 0 <= ih < h and 0 <= iw < wd:
                                    v = x[n, ci, ih, iw]
                                else:
                                    v = 0.0
                                acc = acc + v * w[co, ci, i, j]
                                ops += 2
                    out[n, co, oh, ow] = acc
    return out_arr, ops


def dense(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t n_batch = x.shape[0], fan_in = x.shape[1], units = w.shape[0]
    out_arr = np.empty((n_batch, units), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, o, i
    cdef double acc
    cdef long long ops = 0
    for n in range(n_batch):
        for o in range(units):
            acc = b[o]
            for i in range(fan_in):
                acc = acc + x[n, i] * w[o, i]
                ops += 2
            out[n, o] = acc
    return out_arr, ops


def maxpool2d(const double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n_batch = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - k) // stride + 1
    out_arr = np.empty((n_batch, c, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, oh, ow, i, j, ih, iw
    cdef double acc, v
    cdef long long ops = 0
    for n in range(n_batch):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    acc = -INFINITY
                    for i in range(k):
                        ih = oh * stride + i - pad
                        for j in range(k):
                            iw = ow * stride + j - pad
                            if 0 <= ih < h and 0 <= iw < wd:
                                v = x[n, ch, ih, iw]
                            else:
                                v = -INFINITY
                            ops += 1
                            if v > acc:
                                acc = v
                    out[n, ch, oh, ow] = acc
    return out_arr, ops


def globalavgpool(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n_batch = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    out_arr = np.empty((n_batch, c, 1, 1), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, i, j
    cdef double acc
    cdef long long ops = 0
    for n in range(n_batch):
        for ch in range(c):
            acc = x[n, ch, 0, 0]
            for i in range(h):
                for j in range(wd):
                    if i == 0 and j == 0:
                        continue
                    acc = acc + x[n, ch, i, j]
                    ops += 1
            out[n, ch, 0, 0] = acc / (h * wd)
            ops += 1
    return out_arr, ops


def relu(const double[::1] x):
    cdef Py_ssize_t i, size = x.shape[0]
    out_arr = np.empty(size, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef long long ops = 0
    for i in range(size):
        out[i] = x[i] if x[i] > 0.0 else 0.0
        ops += 1
    return out_arr, ops


def add(const double[::1] a, const double[::1] b):
    cdef Py_ssize_t i, size = a.shape[0]
    out_arr = np.empty(size, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef long long ops = 0
    for i in range(size):
        out[i] = a[i] + b[i]
        ops += 1
    return out_arr, ops


def softmax(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], r, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s, e
    cdef long long ops = 0
    for r in range(rows):
        m = -INFINITY
        for j in range(cols):
            if x[r, j] > m:
                m = x[r, j]
            ops += 1
        s = 0.0
        for j in range(cols):
            e = exp(x[r, j] - m)
            out[r, j] = e
            s = s + e
            ops += 3
        for j in range(cols):
            out[r, j] = out[r, j] / s
            ops += 1
    return out_arr, ops
