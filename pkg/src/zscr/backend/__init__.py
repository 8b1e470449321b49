"""Kernel backend selection.

The hot elementwise kernels exist twice: a compiled Cython extension
(zscr.backend._ckernels) and a pure-numpy fallback (zscr.backend.numpy_kernels).
At import time the compiled extension is preferred when present; the
environment variable ZSCR_BACKEND=numpy|cython|auto overrides the choice.
Matrix products are BLAS-bound and stay in numpy under both backends.
"""

import os

from . import numpy_kernels


def _select():
    choice = os.environ.get("ZSCR_BACKEND", "auto").lower()
    if choice not in ("auto", "numpy", "cython"):
        raise ValueError(f"ZSCR_BACKEND must be auto, numpy or cython, got {choice!r}")
    if choice == "numpy":
        return numpy_kernels
    try:
        from . import _ckernels
        return _ckernels
    except ImportError:
        if choice == "cython":
            raise
        return numpy_kernels


kernels = _select()


def available_backends():
    """All importable kernel modules, compiled one first when present."""
    mods = []
    try:
        from . import _ckernels
        mods.append(_ckernels)
    except ImportError:
        pass
    mods.append(numpy_kernels)
    return mods
