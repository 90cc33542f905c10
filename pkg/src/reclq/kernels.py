"""Kernel backend selection.

The compiled extension is used when it imports; ``RLQ_PURE=1`` forces the
numpy fallback.  Both expose the same ``euler_affine`` signature.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("RLQ_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _module(backend):
    backend = backend or BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "numpy":
        return _kernels_py
    raise ValueError(f"unknown backend {backend!r}")


def euler_affine(x0, Acl, Ccl, drift, diff, dW, dt, milstein=False, backend=None):
    """Time-step ``dX = (Acl X + drift) ds + (Ccl X + diff) dW`` for a block of paths.

    Parameters
    ----------
    x0 : (n,) or (P, n)
    Acl, Ccl : (n, n)
    drift, diff : (K, n) or (P, K, n) offsets, broadcast over paths
    dW : (P, K) Brownian increments
    milstein : add the scalar-noise Milstein correction ``0.5 Ccl g (dW^2 - dt)``

    Returns
    -------
    X : (P, K + 1, n)
    step : first blow-up step or -1
    """
    dW = np.ascontiguousarray(dW, dtype=float)
    P, K = dW.shape
    Acl = np.ascontiguousarray(Acl, dtype=float)
    n = Acl.shape[0]
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (P, n))
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (P, K, n))
    diff = np.broadcast_to(np.asarray(diff, dtype=float), (P, K, n))
    Ccl = np.ascontiguousarray(Ccl, dtype=float)
    return _module(backend).euler_affine(x0, Acl, Ccl, drift, diff, dW, float(dt), bool(milstein))


def lyapunov_accumulate(A, C, Lam, dW, dt, rate, F, level=1e12, backend=None):
    """Per-path trapezoid of ``mu Psi^T Lam Psi`` (see the compiled kernel)."""
    mod = _module(backend)
    c = lambda M: np.ascontiguousarray(M, dtype=float)
    return mod.lyapunov_accumulate(c(A), c(C), c(Lam), c(dW), float(dt), float(rate),
                                   float(F), float(level))
