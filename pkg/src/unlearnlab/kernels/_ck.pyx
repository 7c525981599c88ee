# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled elementwise / row-softmax kernels for the tensor engine.

Mirrors the numpy fallback in ``_np.py``: contiguous float64 in, fresh
float64 out.
"""

import numpy as np

from libc.math cimport exp as c_exp, tanh as c_tanh

BACKEND = "cython"


cdef void _relu_fwd(const double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = x[i] if x[i] > 0.0 else 0.0


cdef void _relu_bwd(const double[::1] x, const double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = gy[i] if x[i] > 0.0 else 0.0


cdef void _tanh_fwd(const double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_tanh(x[i])


cdef void _tanh_bwd(const double[::1] y, const double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(y.shape[0]):
        out[i] = gy[i] * (1.0 - y[i] * y[i])


cdef void _sigmoid_fwd(const double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double e
    for i in range(x.shape[0]):
        if x[i] >= 0.0:
            out[i] = 1.0 / (1.0 + c_exp(-x[i]))
        else:
            e = c_exp(x[i])
            out[i] = e / (1.0 + e)


cdef void _sigmoid_bwd(const double[::1] y, const double[::1] gy, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(y.shape[0]):
        out[i] = gy[i] * y[i] * (1.0 - y[i])


cdef void _clip_fwd(const double[::1] x, double lo, double hi, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        if x[i] < lo:
            out[i] = lo
        elif x[i] > hi:
            out[i] = hi
        else:
            out[i] = x[i]


cdef void _clip_bwd(const double[::1] x, const double[::1] gy, double lo, double hi,
                    double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = gy[i] if (x[i] > lo and x[i] < hi) else 0.0


cdef void _softmax_fwd(const double[:, ::1] x, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(x.shape[0]):
        m = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(x.shape[1]):
            out[i, j] = c_exp(x[i, j] - m)
            s += out[i, j]
        for j in range(x.shape[1]):
            out[i, j] /= s


cdef void _softmax_bwd(const double[:, ::1] y, const double[:, ::1] gy,
                       double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(y.shape[0]):
        dot = 0.0
        for j in range(y.shape[1]):
            dot += y[i, j] * gy[i, j]
        for j in range(y.shape[1]):
            out[i, j] = y[i, j] * (gy[i, j] - dot)


def relu_fwd(x):
    out = np.empty_like(x)
    _relu_fwd(x.ravel(), out.ravel())
    return out


def relu_bwd(x, gy):
    out = np.empty_like(x)
    _relu_bwd(x.ravel(), gy.ravel(), out.ravel())
    return out


def tanh_fwd(x):
    out = np.empty_like(x)
    _tanh_fwd(x.ravel(), out.ravel())
    return out


def tanh_bwd(y, gy):
    out = np.empty_like(y)
    _tanh_bwd(y.ravel(), gy.ravel(), out.ravel())
    return out


def sigmoid_fwd(x):
    out = np.empty_like(x)
    _sigmoid_fwd(x.ravel(), out.ravel())
    return out


def sigmoid_bwd(y, gy):
    out = np.empty_like(y)
    _sigmoid_bwd(y.ravel(), gy.ravel(), out.ravel())
    return out


def clip_fwd(x, lo, hi):
    out = np.empty_like(x)
    _clip_fwd(x.ravel(), lo, hi, out.ravel())
    return out


def clip_bwd(x, gy, lo, hi):
    out = np.empty_like(x)
    _clip_bwd(x.ravel(), gy.ravel(), lo, hi, out.ravel())
    return out


def softmax_fwd(x):
    out = np.empty_like(x)
    _softmax_fwd(x, out)
    return out


def softmax_bwd(y, gy):
    out = np.empty_like(y)
    _softmax_bwd(y, gy, out)
    return out
