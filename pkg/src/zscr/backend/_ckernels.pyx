# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of zscr.backend.numpy_kernels.

Each kernel fuses the elementwise work of its numpy counterpart into a single
pass, avoiding intermediate arrays. Semantics match the numpy backend; the
operation order inside each loop mirrors the numpy expression so results agree
to the last ulp wherever the C library allows.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, expf, fabs, fabsf, log1p, log1pf, sqrt, sqrtf

cnp.import_array()

NAME = "cython"

ctypedef fused real:
    float
    double


def _out_like(arr):
    return np.empty_like(arr, order="C")


def _flat(arr):
    return np.ascontiguousarray(arr).ravel()


cdef void _relu_fwd(const real* x, real* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        y[i] = x[i] if x[i] > 0 else <real>0


cdef void _relu_bwd(const real* x, const real* g, real* o, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = g[i] if x[i] > 0 else <real>0


cdef void _leaky_fwd(const real* x, real* y, real slope, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        y[i] = x[i] if x[i] >= 0 else x[i] * slope


cdef void _leaky_bwd(const real* x, const real* g, real* o, real slope, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = g[i] if x[i] >= 0 else g[i] * slope


cdef void _softplus_fwd_f(const float* x, float* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        y[i] = (x[i] if x[i] > 0 else 0.0) + log1pf(expf(-fabsf(x[i])))


cdef void _softplus_fwd_d(const double* x, double* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        y[i] = (x[i] if x[i] > 0 else 0.0) + log1p(exp(-fabs(x[i])))


cdef void _softplus_bwd_f(const float* x, const float* g, float* o, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef float e
    for i in range(n):
        e = expf(-fabsf(x[i]))
        o[i] = g[i] * (1.0 / (1.0 + e)) if x[i] >= 0 else g[i] * (e / (1.0 + e))


cdef void _softplus_bwd_d(const double* x, const double* g, double* o, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double e
    for i in range(n):
        e = exp(-fabs(x[i]))
        o[i] = g[i] * (1.0 / (1.0 + e)) if x[i] >= 0 else g[i] * (e / (1.0 + e))


cdef void _row_l1(const real* a, const real* b, real* sign, double* dist,
                  Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t r, c, base
    cdef real d
    cdef double acc
    for r in range(rows):
        base = r * cols
        acc = 0.0
        for c in range(cols):
            d = a[base + c] - b[base + c]
            if d > 0:
                sign[base + c] = <real>1
                acc += d
            elif d < 0:
                sign[base + c] = <real>-1
                acc -= d
            else:
                sign[base + c] = <real>0
        dist[r] = acc


cdef void _rmsprop_f(const float* w, const float* g, const float* s,
                     float* w2, float* s2, float lr, float rho, float eps,
                     Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        s2[i] = rho * s[i] + (1.0 - rho) * (g[i] * g[i])
        w2[i] = w[i] - lr * g[i] / (sqrtf(s2[i]) + eps)


cdef void _rmsprop_d(const double* w, const double* g, const double* s,
                     double* w2, double* s2, double lr, double rho, double eps,
                     Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        s2[i] = rho * s[i] + (1.0 - rho) * (g[i] * g[i])
        w2[i] = w[i] - lr * g[i] / (sqrt(s2[i]) + eps)


cdef void _clip(const real* w, real* o, real k, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = -k if w[i] < -k else (k if w[i] > k else w[i])


def relu_fwd(x):
    cdef cnp.ndarray xf = _flat(x)
    out = _out_like(x)
    cdef cnp.ndarray of = out.ravel()
    if xf.dtype == np.float32:
        _relu_fwd[float](<const float*>xf.data, <float*>of.data, xf.size)
    else:
        _relu_fwd[double](<const double*>xf.data, <double*>of.data, xf.size)
    return out


def relu_bwd(x, g):
    cdef cnp.ndarray xf = _flat(x)
    cdef cnp.ndarray gf = _flat(g)
    out = _out_like(x)
    cdef cnp.ndarray of = out.ravel()
    if xf.dtype == np.float32:
        _relu_bwd[float](<const float*>xf.data, <const float*>gf.data, <float*>of.data, xf.size)
    else:
        _relu_bwd[double](<const double*>xf.data, <const double*>gf.data, <double*>of.data, xf.size)
    return out


def leaky_relu_fwd(x, slope):
    cdef cnp.ndarray xf = _flat(x)
    out = _out_like(x)
    cdef cnp.ndarray of = out.ravel()
    if xf.dtype == np.float32:
        _leaky_fwd[float](<const float*>xf.data, <float*>of.data, <float>slope, xf.size)
    else:
        _leaky_fwd[double](<const double*>xf.data, <double*>of.data, <double>slope, xf.size)
    return out


def leaky_relu_bwd(x, g, slope):
    cdef cnp.ndarray xf = _flat(x)
    cdef cnp.ndarray gf = _flat(g)
    out = _out_like(x)
    cdef cnp.ndarray of = out.ravel()
    if xf.dtype == np.float32:
        _leaky_bwd[float](<const float*>xf.data, <const float*>gf.data, <float*>of.data, <float>slope, xf.size)
    else:
        _leaky_bwd[double](<const double*>xf.data, <const double*>gf.data, <double*>of.data, <double>slope, xf.size)
    return out


def softplus_fwd(x):
    cdef cnp.ndarray xf = _flat(x)
    out = _out_like(x)
    cdef cnp.ndarray of = out.ravel()
    if xf.dtype == np.float32:
        _softplus_fwd_f(<const float*>xf.data, <float*>of.data, xf.size)
    else:
        _softplus_fwd_d(<const double*>xf.data, <double*>of.data, xf.size)
    return out


def softplus_bwd(x, g):
    cdef cnp.ndarray xf = _flat(x)
    cdef cnp.ndarray gf = _flat(g)
    out = _out_like(x)
    cdef cnp.ndarray of = out.ravel()
    if xf.dtype == np.float32:
        _softplus_bwd_f(<const float*>xf.data, <const float*>gf.data, <float*>of.data, xf.size)
    else:
        _softplus_bwd_d(<const double*>xf.data, <const double*>gf.data, <double*>of.data, xf.size)
    return out


def row_l1_fwd(a, b):
    cdef cnp.ndarray af = np.ascontiguousarray(a)
    cdef cnp.ndarray bf = np.ascontiguousarray(b)
    sign = np.empty_like(af)
    cdef cnp.ndarray sf = sign
    cdef Py_ssize_t rows = af.shape[0]
    cdef Py_ssize_t cols = af.shape[1]
    cdef cnp.ndarray dist64 = np.empty(rows, dtype=np.float64)
    if af.dtype == np.float32:
        _row_l1[float](<const float*>af.data, <const float*>bf.data,
                       <float*>sf.data, <double*>dist64.data, rows, cols)
    else:
        _row_l1[double](<const double*>af.data, <const double*>bf.data,
                        <double*>sf.data, <double*>dist64.data, rows, cols)
    return dist64.astype(af.dtype), sign


def rmsprop_step(w, g, s, lr, rho, eps):
    cdef cnp.ndarray wf = _flat(w)
    cdef cnp.ndarray gf = _flat(g)
    cdef cnp.ndarray sf = _flat(s)
    w2 = _out_like(w)
    s2 = _out_like(w)
    cdef cnp.ndarray w2f = w2.ravel()
    cdef cnp.ndarray s2f = s2.ravel()
    if wf.dtype == np.float32:
        _rmsprop_f(<const float*>wf.data, <const float*>gf.data, <const float*>sf.data,
                   <float*>w2f.data, <float*>s2f.data,
                   <float>lr, <float>rho, <float>eps, wf.size)
    else:
        _rmsprop_d(<const double*>wf.data, <const double*>gf.data, <const double*>sf.data,
                   <double*>w2f.data, <double*>s2f.data,
                   <double>lr, <double>rho, <double>eps, wf.size)
    return w2, s2


def clip(w, k):
    cdef cnp.ndarray wf = _flat(w)
    out = _out_like(w)
    cdef cnp.ndarray of = out.ravel()
    if wf.dtype == np.float32:
        _clip[float](<const float*>wf.data, <float*>of.data, <float>k, wf.size)
    else:
        _clip[double](<const double*>wf.data, <double*>of.data, <double>k, wf.size)
    return out
