"""Optimal feedback synthesis for the weighted problem.

The stabilizing solution of

    P A + A^T P + C^T P C + Q - E P - F(P C + C^T P)
        - K^T (R + D^T P D)^-1 K = 0,   K = B^T P + D^T P C + S - F D^T P,

is computed by Newton-Kleinman iteration on the transformed (classical)
system.  The optimal control is ``u = Theta_bar X + vbar(s)`` with
``Theta_bar = -(R + D^T P D)^-1 K`` and ``vbar`` built from the affine
adjoint ``eta``, the decaying solution of

    d eta = -[M eta + Theta_bar^T r + q] ds,   M = (A - E I - F C + (B - F D) Theta_bar)^T.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import quad_vec

from .errors import (IterationDiverged, NoInitialStabilizer, NotCertified, NotFound,
                     NotHomogeneous, NotHurwitz, QuadratureFailure, SingularOperator,
                     SingularRplus)
from .stability import LyapunovProblem, find_stabilizer, is_stabilizer, solve_lyapunov
from .transform import to_classical

log = logging.getLogger(__name__)

MAX_ITER = 25
STEP_RTOL = 1e-12
RESIDUAL_TOL = 1e-10
DIVERGE_STREAK = 5
TAIL_ENVELOPE = 1e-12
RCOND_MIN = 1e-14


def gain_from_P(spec, P):
    """``Theta_bar = -(R + D^T P D)^-1 (B^T P + D^T P C + S - F D^T P)``."""
    Rp = _rplus(spec, P)
    K = spec.B.T @ P + spec.D.T @ P @ spec.C + spec.S - spec.F * spec.D.T @ P
    return -np.linalg.solve(Rp, K)


def tilde_gain(spec, P, ts=None):
    """Gain of the transformed problem, ``-(R + Dt^T P Dt)^-1 (Bt^T P + Dt^T P Ct + S)``."""
    ts = ts or to_classical(spec)
    Rp = spec.R + ts.Dt.T @ P @ ts.Dt
    return -np.linalg.solve(Rp, ts.Bt.T @ P + ts.Dt.T @ P @ ts.Ct + spec.S)


def _rplus(spec, P):
    Rp = spec.R + spec.D.T @ P @ spec.D
    Rp = (Rp + Rp.T) / 2
    if 1 / np.linalg.cond(Rp, 1) < RCOND_MIN:
        raise SingularRplus("R + D^T P D is singular", operation="assemble_vbar")
    return Rp


def are_residual(spec, P):
    """Residual of the Riccati equation in the original coordinates."""
    A, B, C, D, E, F = spec.A, spec.B, spec.C, spec.D, spec.E, spec.F
    K = B.T @ P + D.T @ P @ C + spec.S - F * D.T @ P
    Rp = spec.R + D.T @ P @ D
    return (P @ A + A.T @ P + C.T @ P @ C + spec.Q - E * P - F * (P @ C + C.T @ P)
            - K.T @ np.linalg.solve(Rp, K))


def _stage_cost(spec, Theta):
    L = spec.Q + spec.S.T @ Theta + Theta.T @ spec.S + Theta.T @ spec.R @ Theta
    return (L + L.T) / 2


@dataclass
class AREInfo:
    iterations: int
    residual: float
    step_norms: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    Theta0: np.ndarray | None = None


def solve_are(spec, Theta0=None, max_iter=MAX_ITER, full_output=False):
    """Stabilizing solution ``P`` and optimal gain ``Theta_bar``.

    Parameters
    ----------
    spec : ProblemSpec
    Theta0 : optional initial stabilizer; defaults to ``0`` when it
        stabilizes and to :func:`find_stabilizer` otherwise.
    max_iter : Newton-Kleinman iteration cap.
    full_output : also return an :class:`AREInfo`.

    Raises
    ------
    NoInitialStabilizer, IterationDiverged, NotCertified
    """
    ts = to_classical(spec)
    if Theta0 is None:
        Theta0 = np.zeros((spec.m, spec.n))
        if not is_stabilizer(Theta0, spec).stable:
            try:
                Theta0 = find_stabilizer(spec)
            except NotFound as exc:
                raise NoInitialStabilizer(str(exc), operation="solve_are") from exc
    else:
        Theta0 = np.atleast_2d(np.asarray(Theta0, dtype=float))
        if not is_stabilizer(Theta0, spec).stable:
            raise NoInitialStabilizer("supplied initial gain does not stabilize",
                                      operation="solve_are")

    info = AREInfo(0, np.inf, Theta0=Theta0)
    Theta = Theta0
    P_prev = None
    streak = 0
    for k in range(1, max_iter + 1):
        prob = LyapunovProblem(ts.At + ts.Bt @ Theta, ts.Ct + ts.Dt @ Theta, 0.0, 0.0,
                               _stage_cost(spec, Theta), require_pd=False)
        try:
            P = solve_lyapunov(prob)
        except SingularOperator as exc:
            raise IterationDiverged(f"Lyapunov solve failed at iteration {k}: {exc}",
                                    operation="solve_are", iteration=k) from exc
        res = float(np.linalg.norm(are_residual(spec, P)))
        info.residuals.append(res)
        info.iterations = k
        info.residual = res
        if P_prev is not None:
            step = float(np.linalg.norm(P - P_prev))
            info.step_norms.append(step)
            log.debug("newton-kleinman %d: step %.3e residual %.3e", k, step, res)
            if step <= STEP_RTOL * np.linalg.norm(P_prev):
                break
            streak = streak + 1 if res > info.residuals[-2] else 0
            if streak >= DIVERGE_STREAK:
                raise IterationDiverged(
                    f"Riccati residual grew for {DIVERGE_STREAK} consecutive iterations",
                    operation="solve_are", iteration=k, residual=res)
        if res <= RESIDUAL_TOL * (1 + np.linalg.norm(P)):
            break
        P_prev = P
        Theta = tilde_gain(spec, P, ts)
    else:
        raise IterationDiverged(f"no convergence in {max_iter} iterations "
                                f"(residual {info.residual:.3g})",
                                operation="solve_are", iteration=max_iter)

    P = (P + P.T) / 2
    Theta_bar = gain_from_P(spec, P)
    verdict = is_stabilizer(Theta_bar, spec)
    if not verdict.stable:
        raise NotCertified(f"gain fails the weighted Lyapunov test: {verdict.reason}",
                           operation="solve_are")
    info.residual = float(np.linalg.norm(are_residual(spec, P)))
    if full_output:
        return P, Theta_bar, info
    return P, Theta_bar


# -- affine terms ---------------------------------------------------------------

def eta_matrix(spec, Theta_bar):
    """``M = (A - E I - F C + (B - F D) Theta_bar)^T``."""
    return (spec.A - spec.E * np.eye(spec.n) - spec.F * spec.C
            + (spec.B - spec.F * spec.D) @ Theta_bar).T


@dataclass(frozen=True)
class EtaSolution:
    """The decaying solution ``eta`` of the affine adjoint equation.

    ``grid``/``values`` hold ``eta`` on the solve grid; ``method`` is
    ``'closed_form'`` (evaluation is exact at any time) or ``'quadrature'``
    (linear interpolation between grid nodes).
    """

    grid: np.ndarray
    values: np.ndarray
    method: str
    M: np.ndarray
    _exact: object = field(default=None, repr=False, compare=False)

    def __call__(self, s):
        s_arr = np.asarray(s, dtype=float)
        if self._exact is not None:
            return self._exact(s_arr)
        if s_arr.size and (s_arr.min() < self.grid[0] - 1e-12 or s_arr.max() > self.grid[-1] + 1e-12):
            raise ValueError(f"eta was solved on [{self.grid[0]}, {self.grid[-1]}] only")
        cols = [np.interp(s_arr, self.grid, self.values[:, i]) for i in range(self.values.shape[1])]
        return np.stack(cols, axis=-1)


def _closed_form(M, forcing_terms):
    """Exact ``eta`` when every forcing term is constant or exponentially decaying.

    ``forcing_terms`` is a list of ``(coef, signal)`` with ``h = sum coef @ signal``.
    """
    n = M.shape[0]
    consts = np.zeros(n)
    decays = []
    for coef, sig in forcing_terms:
        if sig.kind == "zero":
            continue
        if sig.kind == "constant":
            consts += coef @ sig.value
        elif sig.kind == "exp_decay":
            vec = np.linalg.solve(sig.rate * np.eye(n) - M, coef @ sig.amplitude)
            decays.append((sig.rate, vec))
        else:
            return None
    base = -np.linalg.solve(M, consts) if np.any(consts) else consts

    def exact(s):
        s = np.asarray(s, dtype=float)
        out = np.broadcast_to(base, s.shape + (n,)).copy()
        for rate, vec in decays:
            out += np.exp(-rate * s)[..., None] * vec
        return out
    return exact


def _tail_length(M, h_bound):
    alpha = np.linalg.eigvals(M).real.max()
    if h_bound == 0.0:
        return 0.0
    # generous envelope constant for non-normal M
    kappa = max(1.0, np.linalg.norm(M, 2) / abs(alpha))
    return max(1.0, np.log(kappa * h_bound / TAIL_ENVELOPE) / abs(alpha))


def solve_eta(spec, Theta_bar, grid, method="auto"):
    """Decaying solution of the affine adjoint equation on ``grid``.

    ``method='auto'`` uses the closed form when ``q`` and ``r`` are zero,
    constant or exponentially decaying, and adaptive quadrature of
    ``eta(s) = int_s^inf exp(M (tau - s)) h(tau) dtau`` otherwise;
    ``method='quadrature'`` forces the quadrature (useful as a cross-check).

    Raises
    ------
    NotHurwitz, QuadratureFailure
    """
    M = eta_matrix(spec, Theta_bar)
    alpha = np.linalg.eigvals(M).real.max()
    if not alpha < 0:
        raise NotHurwitz(f"eta matrix has spectral abscissa {alpha:.6g} >= 0",
                         operation="solve_eta", abscissa=alpha)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two nodes")
    terms = [(np.eye(spec.n), spec.q), (Theta_bar.T, spec.r)]
    h = lambda s: spec.q(s) + Theta_bar.T @ spec.r(s)

    if method == "auto":
        exact = _closed_form(M, terms)
        if exact is not None:
            return EtaSolution(grid, exact(grid), "closed_form", M, exact)
    elif method != "quadrature":
        raise ValueError(f"unknown method {method!r}")

    breaks = np.unique(np.concatenate([sig.breakpoints for sig in (spec.q, spec.r)
                                       if sig.kind == "piecewise_constant"] or [np.empty(0)]))
    probe = np.concatenate([grid, breaks, [grid[-1] + 1.0]])
    h_bound = float(np.abs(np.stack([h(s) for s in probe])).max())
    for sig in (spec.q, spec.r):
        if sig.kind == "constant":
            h_bound = max(h_bound, np.abs(sig.value).max() * (1 + np.abs(Theta_bar).max()))
    T_tail = _tail_length(M, h_bound)

    def integral(a, b):
        if b <= a:
            return np.zeros(spec.n)
        pts = [p for p in breaks if a < p < b]
        res, err = quad_vec(lambda tau: sla.expm(M * (tau - a)) @ h(tau), a, b,
                            epsabs=1e-13, epsrel=1e-11, points=pts or None, limit=2000)
        if not np.all(np.isfinite(res)) or err > 1e-8 * (1 + np.abs(res).max()):
            raise QuadratureFailure(f"quadrature error estimate {err:.3g} on [{a}, {b}]",
                                    operation="solve_eta")
        return res

    values = np.empty((grid.size, spec.n))
    values[-1] = integral(grid[-1], grid[-1] + T_tail)
    for i in range(grid.size - 2, -1, -1):
        values[i] = (sla.expm(M * (grid[i + 1] - grid[i])) @ values[i + 1]
                     + integral(grid[i], grid[i + 1]))
    return EtaSolution(grid, values, "quadrature", M)


@dataclass(frozen=True)
class VBar:
    """``vbar(s) = -(R + D^T P D)^-1 [(B - F D)^T eta(s) + r(s)]``."""

    gain: np.ndarray  # -(R + D^T P D)^-1
    BF: np.ndarray    # (B - F D)^T
    eta: EtaSolution
    r: object

    def __call__(self, s):
        e = self.eta(s)
        return (e @ self.BF.T + self.r(s)) @ self.gain.T


def assemble_vbar(spec, P, eta):
    """The affine control offset as a callable of time."""
    Rp = _rplus(spec, P)
    return VBar(-np.linalg.inv(Rp), (spec.B - spec.F * spec.D).T, eta, spec.r)


def value_homogeneous(P, x, spec=None):
    """Optimal cost ``x^T P x`` of the homogeneous problem."""
    if spec is not None and not spec.homogeneous:
        raise NotHomogeneous("q, r, b and sigma must vanish", operation="value_homogeneous")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(x @ P @ x)


# -- full synthesis -------------------------------------------------------------

@dataclass(frozen=True)
class SynthesisResult:
    P: np.ndarray
    Theta_bar: np.ndarray
    eta: EtaSolution
    vbar: VBar
    iterations: int
    residual: float
    F: float
    info: AREInfo = field(repr=False, compare=False)

    @property
    def eta_grid(self):
        return self.eta.grid

    def zeta(self, s):
        """``zeta = -(F/2) eta``; the affine part of the adjoint ``Z``."""
        return -self.F / 2 * self.eta(s)

    def table(self, grid=None):
        """Columns ``s, eta_1..eta_n, vbar_1..vbar_m`` on ``grid``."""
        grid = self.eta.grid if grid is None else np.asarray(grid, dtype=float)
        return np.column_stack([grid, self.eta(grid), self.vbar(grid)])

    def to_csv(self, path, grid=None):
        n, m = self.P.shape[0], self.Theta_bar.shape[0]
        header = ",".join(["s"] + [f"eta_{i + 1}" for i in range(n)]
                          + [f"vbar_{j + 1}" for j in range(m)])
        np.savetxt(path, self.table(grid), delimiter=",", header=header, comments="",
                   fmt="%.17g")

    def as_dict(self):
        return {"P": self.P.ravel().tolist(), "Theta_bar": self.Theta_bar.ravel().tolist(),
                "iterations": self.iterations, "residual": self.residual,
                "eta_method": self.eta.method}


def default_grid(spec, Theta_bar, n_nodes=201, decades=10.0):
    """Output grid from ``t0`` until ``exp(M s)`` has decayed by ``e^-decades``."""
    alpha = np.linalg.eigvals(eta_matrix(spec, Theta_bar)).real.max()
    horizon = decades / abs(alpha) if alpha < 0 else decades
    return np.linspace(spec.t0, spec.t0 + horizon, n_nodes)


def synthesize(spec, grid=None, eta_method="auto"):
    """Riccati solution, optimal gain and affine terms for ``spec``."""
    P, Theta_bar, info = solve_are(spec, full_output=True)
    if grid is None:
        grid = default_grid(spec, Theta_bar)
    eta = solve_eta(spec, Theta_bar, grid, eta_method)
    vbar = assemble_vbar(spec, P, eta)
    return SynthesisResult(P, Theta_bar, eta, vbar, info.iterations, info.residual, spec.F,
                           info)
