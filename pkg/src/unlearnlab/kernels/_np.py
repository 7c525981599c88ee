"""Numpy fallback for the hot elementwise / row-softmax kernels.

Same call signatures as the compiled module; all inputs are contiguous
float64 arrays and outputs are freshly allocated.
"""

import numpy as np

BACKEND = "numpy"


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, gy):
    return np.where(x > 0.0, gy, 0.0)


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, gy):
    return gy * (1.0 - y * y)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, gy):
    return gy * y * (1.0 - y)


def clip_fwd(x, lo, hi):
    return np.clip(x, lo, hi)


def clip_bwd(x, gy, lo, hi):
    # Pass-through strictly inside the bounds, zero outside.
    return np.where((x > lo) & (x < hi), gy, 0.0)


def softmax_fwd(x):
    # x: 2-D, softmax over the last axis.
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)
