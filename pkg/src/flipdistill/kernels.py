"""Numeric hot-path kernels with numba-compiled and pure-numpy variants.

The numba path is the default when numba imports cleanly; set the
environment variable ``FLIPDISTILL_NO_NUMBA=1`` to force the numpy
fallback (useful for debugging and for the benchmark in
``benchmarks/bench_kernels.py``).

Everything here operates on plain float64 ndarrays and is free of any
autodiff bookkeeping: these kernels either sit outside the gradient tape
(optimizer updates, gradient clipping) or implement both the forward and
backward halves of a tape op (row softmax).
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("FLIPDISTILL_NO_NUMBA", "") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if not USE_NUMBA:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


@njit(cache=True)
def clip_values(g, lo, hi):
    """Elementwise clip of a flat gradient array, in place."""
    for i in range(g.size):
        if g[i] < lo:
            g[i] = lo
        elif g[i] > hi:
            g[i] = hi


@njit(cache=True)
def adamw_step(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay adaptive-moment update, in place on flat arrays."""
    b1t = 1.0 - beta1 ** t
    b2t = 1.0 - beta2 ** t
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / b1t
        vhat = v[i] / b2t
        p[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p[i])


@njit(cache=True)
def sgd_step(p, g, lr, weight_decay):
    """Plain SGD with decoupled weight decay, in place on flat arrays."""
    for i in range(p.size):
        p[i] -= lr * (g[i] + weight_decay * p[i])


@njit(cache=True)
def softmax_rows(x):
    """Row softmax with max-subtraction; x is 2-D."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        mx = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(x.shape[1]):
            out[i, j] = np.exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(x.shape[1]):
            out[i, j] /= s
    return out


@njit(cache=True)
def softmax_rows_backward(y, gy):
    """Backward of row softmax: gx = y * (gy - sum(gy * y, row))."""
    gx = np.empty_like(y)
    for i in range(y.shape[0]):
        dot = 0.0
        for j in range(y.shape[1]):
            dot += gy[i, j] * y[i, j]
        for j in range(y.shape[1]):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


def clip_values_numpy(g, lo, hi):
    np.clip(g, lo, hi, out=g)


def adamw_step_numpy(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


def sgd_step_numpy(p, g, lr, weight_decay):
    p -= lr * (g + weight_decay * p)


def softmax_rows_numpy(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_rows_backward_numpy(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


if not USE_NUMBA:
    clip_values = clip_values_numpy
    adamw_step = adamw_step_numpy
    sgd_step = sgd_step_numpy
    softmax_rows = softmax_rows_numpy
    softmax_rows_backward = softmax_rows_backward_numpy
