"""Equivalence between the weighted problem and a classical LQ problem.

Multiplying state and control by ``exp(nu(s, t)) = sqrt(mu(s)/mu(t))`` turns
the weighted problem into an unweighted one with

    At = A - (F/2) C - ((4E + F^2)/8) I,   Bt = B - (F/2) D,
    Ct = C - (F/2) I,                       Dt = D,

and unchanged cost matrices.  The linear cost terms map as
``qt = exp(nu) q`` and ``rt = exp(nu) r``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch


@dataclass(frozen=True)
class TransformedSystem:
    At: np.ndarray
    Bt: np.ndarray
    Ct: np.ndarray
    Dt: np.ndarray

    def as_dict(self):
        return {k: np.asarray(getattr(self, k)).ravel().tolist()
                for k in ("At", "Bt", "Ct", "Dt")}


def to_classical(spec):
    """Transformed matrices ``(At, Bt, Ct, Dt)`` of ``spec``."""
    E, F = spec.E, spec.F
    eye = np.eye(spec.n)
    return TransformedSystem(
        At=spec.A - F / 2 * spec.C - (4 * E + F * F) / 8 * eye,
        Bt=spec.B - F / 2 * spec.D,
        Ct=spec.C - F / 2 * eye,
        Dt=spec.D.copy(),
    )


def from_classical(ts, E, F):
    """Inverse of :func:`to_classical`; returns ``(A, B, C, D)``."""
    n = ts.At.shape[0]
    eye = np.eye(n)
    C = ts.Ct + F / 2 * eye
    D = ts.Dt.copy()
    B = ts.Bt + F / 2 * ts.Dt
    A = ts.At + F / 2 * C + (4 * E + F * F) / 8 * eye
    return A, B, C, D


def _factor(nu_path, path, operation="map_state_control_path"):
    nu_path = np.asarray(nu_path, dtype=float)
    path = np.asarray(path, dtype=float)
    if path.shape[:nu_path.ndim] != nu_path.shape:
        raise GridMismatch(f"path of shape {path.shape} does not match exponent grid "
                           f"{nu_path.shape}", operation=operation)
    return np.exp(nu_path).reshape(nu_path.shape + (1,) * (path.ndim - nu_path.ndim))


def map_state_control_path(X_path, u_path, nu_path):
    """``(Xt, ut) = (exp(nu) X, exp(nu) u)`` on a common grid.

    ``nu_path`` has the leading shape of the paths (e.g. ``(paths, steps)``)
    and the trailing state/control axis is broadcast.
    """
    return X_path * _factor(nu_path, X_path), u_path * _factor(nu_path, u_path)


def unmap_state_control_path(Xt_path, ut_path, nu_path):
    """Inverse of :func:`map_state_control_path`: multiply by ``exp(-nu)``."""
    neg = -np.asarray(nu_path, dtype=float)
    return Xt_path * _factor(neg, Xt_path), ut_path * _factor(neg, ut_path)


def map_adjoint(Yt_path, Zt_path, nu_tilde_path, F):
    """Adjoint pair of the original problem from the transformed one.

    ``Y = exp(nu_tilde) Yt`` and ``Z = exp(nu_tilde) (Zt + (F/2) Yt)`` with
    ``nu_tilde = -nu``.
    """
    Yt_path = np.asarray(Yt_path, dtype=float)
    Zt_path = np.asarray(Zt_path, dtype=float)
    if Yt_path.shape != Zt_path.shape:
        raise GridMismatch("Yt and Zt must share a grid", operation="map_adjoint")
    f = _factor(nu_tilde_path, Yt_path, "map_adjoint")
    return f * Yt_path, f * (Zt_path + F / 2 * Yt_path)
