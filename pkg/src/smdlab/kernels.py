"""Kernel backend selection.

The compiled extension is used when it imports; ``SMD_PURE_PYTHON=1`` forces
the numpy fallback. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("SMD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def mixture_logpdf(x, means, prec_chol, log_coef):
    return _impl.mixture_logpdf(_c(x), _c(means), _c(prec_chol), _c(log_coef))


def silu(a):
    return _impl.silu(_c(a))


def silu_film(a, scale, shift):
    return _impl.silu_film(_c(a), _c(scale), _c(shift))


def silu_grad(a, dact):
    return _impl.silu_grad(_c(a), _c(dact))


def silu_film_grad(a, act, scale, dh):
    return _impl.silu_film_grad(_c(a), _c(act), _c(scale), _c(dh))


def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """Update p, m, v in place. All four arrays must be C-contiguous float64 of one shape."""
    flat = []
    for a in (p, g, m, v):
        if a.dtype != np.float64 or not a.flags.c_contiguous:
            raise ValueError("adam_update needs C-contiguous float64 arrays")
        flat.append(a.reshape(-1))
    _impl.adam_update(*flat, float(lr), float(b1), float(b2), float(c1), float(c2), float(eps))
