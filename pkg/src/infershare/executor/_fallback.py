"""Pure-Python layer kernels (numpy elementwise ops only, no BLAS).

Mirrors ``_kernels.pyx``: every output element is accumulated in the same
order as the compiled loops, so conv2d/dense/add/relu/pool results are
bit-identical between backends. ``ops`` is the number of scalar arithmetic
operations carried out by the vectorized calls.
"""
import numpy as np

NAME = "python"


def conv2d(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    acc = np.empty((n, cout, ho, wo))
    acc[...] = b[None, :, None, None]
    ops = 0
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                window = xp[:, ci, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                prod = window[:, None, :, :] * w[None, :, ci, i, j, None, None]
                acc = acc + prod
                ops += 2 * prod.size
    return acc, ops


def dense(x, w, b):
    n, fan_in = x.shape
    acc = np.empty((n, w.shape[0]))
    acc[...] = b[None, :]
    ops = 0
    for i in range(fan_in):
        prod = x[:, i, None] * w[None, :, i]
        acc = acc + prod
        ops += 2 * prod.size
    return acc, ops


def maxpool2d(x, k, stride, pad):
    n, c, h, wd = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.full((n, c, h + 2 * pad, wd + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    acc = np.full((n, c, ho, wo), -np.inf)
    ops = 0
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            acc = np.where(window > acc, window, acc)
            ops += acc.size
    return acc, ops


def globalavgpool(x):
    n, c, h, wd = x.shape
    acc = x[:, :, 0, 0].copy()
    ops = 0
    for i in range(h):
        for j in range(wd):
            if i == 0 and j == 0:
                continue
            acc = acc + x[:, :, i, j]
            ops += acc.size
    out = (acc / (h * wd)).reshape(n, c, 1, 1)
    return out, ops + acc.size


def relu(x):
    out = np.where(x > 0.0, x, 0.0)
    return out, out.size


def add(a, b):
    out = a + b
    return out, out.size


def softmax(x):
    rows, cols = x.shape
    m = np.full(rows, -np.inf)
    ops = 0
    for j in range(cols):
        m = np.where(x[:, j] > m, x[:, j], m)
        ops += rows
    shifted = x - m[:, None]
    e = np.exp(shifted)
    ops += shifted.size + e.size
    s = np.zeros(rows)
    for j in range(cols):
        s = s + e[:, j]
        ops += rows
    out = e / s[:, None]
    return out, ops + out.size
