"""Pure-numpy implementations of the hot kernels.

This is the fallback backend; zscr.backend._ckernels provides the same
functions as a compiled extension. Both operate on C-contiguous float32 or
float64 arrays and always return freshly allocated outputs.
"""

import numpy as np

NAME = "numpy"


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(x, g):
    return np.where(x > 0, g, 0).astype(x.dtype, copy=False)


def leaky_relu_fwd(x, slope):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_bwd(x, g, slope):
    return np.where(x >= 0, g, g * x.dtype.type(slope))


def softplus_fwd(x):
    # max(x, 0) + log1p(exp(-|x|)) never overflows
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus_bwd(x, g):
    # derivative is the logistic sigmoid, computed overflow-safely
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return (g * sig).astype(x.dtype, copy=False)


def row_l1_fwd(a, b):
    """Per-row Manhattan distance and the sign matrix of (a - b).

    Returns (dist, sign) where dist[r] = sum_j |a[r,j] - b[r,j]| accumulated
    in float64, and sign has the dtype of the inputs.
    """
    d = a - b
    sign = np.sign(d)
    dist = np.abs(d).sum(axis=1, dtype=np.float64).astype(a.dtype)
    return dist, sign


def rmsprop_step(w, g, s, lr, rho, eps):
    """One RMSProp update; returns (new_weights, new_accumulator)."""
    dt = w.dtype.type
    s2 = dt(rho) * s + dt(1.0 - rho) * (g * g)
    w2 = w - dt(lr) * g / (np.sqrt(s2) + dt(eps))
    return w2, s2


def clip(w, k):
    return np.clip(w, -w.dtype.type(k), w.dtype.type(k))
