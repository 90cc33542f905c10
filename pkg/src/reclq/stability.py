"""Weighted Lyapunov equations and weighted L2 stability.

The weighted Lyapunov operator is

    L(P) = -E P - F (P C + C^T P) + P A + A^T P + C^T P C,

and ``[A, C]`` is weighted L2-stable iff ``L(P) + I = 0`` has a positive
definite solution.  Expanding the transformed matrices
``At = A - (F/2) C - ((4E + F^2)/8) I`` and ``Ct = C - (F/2) I`` shows
``L(P) = P At + At^T P + Ct^T P Ct``, the classical operator of ``[At, Ct]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp

from . import kernels
from .errors import (DivergenceDetected, DimensionMismatch, NotFound, NotSymmetric,
                     ProblemTooLarge, SingularOperator)
from .model import is_positive_definite, require_positive_definite
from .parallel import map_blocks, path_blocks
from .weight import brownian_increments

MAX_N = 64
RESIDUAL_RTOL = 1e-10
RCOND_MIN = 1e-14
DIVERGENCE_LEVEL = 1e12


def tilde_coefficients(A, C, E, F):
    """``(At, Ct)`` of the classical Lyapunov operator equal to the weighted one."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    eye = np.eye(A.shape[0])
    return A - F / 2 * C - (4 * E + F * F) / 8 * eye, C - F / 2 * eye


@dataclass(frozen=True)
class LyapunovProblem:
    """Data of ``-E P - F(PC + C^T P) + PA + A^T P + C^T P C + Lambda = 0``.

    ``Lambda`` must be positive definite unless ``require_pd=False`` (used by
    Riccati iterations whose stage cost may be only semidefinite, and by the
    Monte Carlo oracle).
    """

    A: np.ndarray
    C: np.ndarray
    E: float
    F: float
    Lambda: np.ndarray
    require_pd: bool = field(default=True, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        L = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        n = A.shape[0]
        for name, M in (("A", A), ("C", C), ("Lambda", L)):
            if M.shape != (n, n):
                raise DimensionMismatch(f"{name} has shape {M.shape}, expected {(n, n)}",
                                        operation="LyapunovProblem")
        scale = max(np.abs(L).max(), 1.0)
        if np.abs(L - L.T).max() > 1e-12 * scale:
            raise NotSymmetric("Lambda is not symmetric", operation="LyapunovProblem")
        L = (L + L.T) / 2
        if self.require_pd:
            require_positive_definite(L, "Lambda", operation="LyapunovProblem")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Lambda", L)
        object.__setattr__(self, "E", float(self.E))
        object.__setattr__(self, "F", float(self.F))

    @property
    def n(self):
        return self.A.shape[0]


@dataclass
class StabilityVerdict:
    stable: bool
    P: np.ndarray | None
    certificate: float
    min_eig_P: float
    reason: str = ""
    sufficient_holds: bool = False

    def as_dict(self):
        return {"stable": self.stable,
                "P": None if self.P is None else self.P.ravel().tolist(),
                "residual": self.certificate, "min_eig_P": self.min_eig_P,
                "reason": self.reason, "sufficient_holds": self.sufficient_holds}


# -- dense operator -------------------------------------------------------------

def lyapunov_operator(A, C, E=0.0, F=0.0, form="weighted"):
    """Matrix of ``vec P -> vec L(P)`` (column-major vec), size n^2 x n^2.

    ``form='weighted'`` assembles the terms with ``E`` and ``F`` explicitly;
    ``form='classical'`` assembles ``P At + At^T P + Ct^T P Ct``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    eye = np.eye(n)
    if form == "classical":
        At, Ct = tilde_coefficients(A, C, E, F)
        return np.kron(At.T, eye) + np.kron(eye, At.T) + np.kron(Ct.T, Ct.T)
    if form == "weighted":
        return (np.kron(A.T, eye) + np.kron(eye, A.T) + np.kron(C.T, C.T)
                - E * np.eye(n * n) - F * (np.kron(C.T, eye) + np.kron(eye, C.T)))
    raise ValueError(f"form must be 'weighted' or 'classical', not {form!r}")


def _sym_index(n):
    rows, cols = np.tril_indices(n)
    return rows, cols, rows + cols * n, cols + rows * n


def _reduced_operator(M, n):
    """Restrict the vec operator to symmetric matrices, lower-triangle unknowns."""
    _, _, lo, up = _sym_index(n)
    cols = M[:, lo] + np.where(lo != up, 1.0, 0.0) * M[:, up]
    return cols[lo]


def lyapunov_residual(P, A, C, E, F, Lambda):
    """``-E P - F(PC + C^T P) + PA + A^T P + C^T P C + Lambda``."""
    P = np.atleast_2d(P)
    A = np.atleast_2d(A)
    C = np.atleast_2d(C)
    return (-E * P - F * (P @ C + C.T @ P) + P @ A + A.T @ P + C.T @ P @ C
            + np.atleast_2d(Lambda))


def solve_lyapunov(prob, form="weighted"):
    """Solve the weighted Lyapunov equation of ``prob``.

    The n^2 x n^2 Kronecker system is reduced to the n(n+1)/2 entries of a
    symmetric ``P`` and solved by LU.  ``form='classical'`` builds the same
    operator from ``(At, Ct)``; both give the same ``P`` up to rounding.

    Raises
    ------
    SingularOperator
        The operator is singular (reciprocal condition number below 1e-14),
        or the solution misses the residual tolerance
        ``1e-10 (||Lambda|| + ||P||)``.
    ProblemTooLarge
        ``n > 64``.
    """
    n = prob.n
    if n > MAX_N:
        raise ProblemTooLarge(f"n={n} exceeds the dense solver limit {MAX_N}",
                              operation="solve_lyapunov")
    M = _reduced_operator(lyapunov_operator(prob.A, prob.C, prob.E, prob.F, form), n)
    rows, cols, lo, _ = _sym_index(n)
    rhs = -prob.Lambda[rows, cols]
    anorm = np.abs(M).sum(axis=0).max()
    if anorm == 0.0:
        raise SingularOperator("Lyapunov operator is zero", operation="solve_lyapunov")
    lu, piv, info = sla.lapack.dgetrf(M)
    rcond = sla.lapack.dgecon(lu, anorm, norm="1")[0] if info == 0 else 0.0
    if info != 0 or rcond < RCOND_MIN:
        raise SingularOperator(
            f"Lyapunov operator is singular (rcond={rcond:.3g})",
            operation="solve_lyapunov", rcond=rcond)
    x = sla.lu_solve((lu, piv), rhs)
    x += sla.lu_solve((lu, piv), rhs - M @ x)  # one refinement step
    P = np.zeros((n, n))
    P[rows, cols] = x
    P[cols, rows] = x
    res = np.linalg.norm(lyapunov_residual(P, prob.A, prob.C, prob.E, prob.F, prob.Lambda))
    tol = RESIDUAL_RTOL * (np.linalg.norm(prob.Lambda) + np.linalg.norm(P))
    if not res <= tol:
        raise SingularOperator(
            f"Lyapunov residual {res:.3g} exceeds {tol:.3g} (ill-conditioned operator)",
            operation="solve_lyapunov", rcond=rcond, residual=res)
    return P


def sufficient_condition(A, C, E, F):
    """Advisory test ``-E - F(C + C^T) + A + A^T + C^T C < 0`` (negative definite)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    M = -E * np.eye(A.shape[0]) - F * (C + C.T) + A + A.T + C.T @ C
    return bool(is_positive_definite(-(M + M.T) / 2))


def is_weighted_stable(A, C, E, F):
    """Necessary and sufficient weighted L2-stability test of ``[A, C]``.

    Solves the weighted Lyapunov equation with ``Lambda = I``; stable iff the
    solve succeeds and ``P`` is positive definite (Cholesky pivot test).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or C.shape != (n, n):
        raise DimensionMismatch("A and C must be square of equal size",
                                operation="is_weighted_stable")
    advisory = sufficient_condition(A, C, E, F)
    prob = LyapunovProblem(A, C, E, F, np.eye(n))
    try:
        P = solve_lyapunov(prob)
    except SingularOperator as exc:
        return StabilityVerdict(False, None, float("inf"), float("nan"),
                                f"singular operator: {exc}", advisory)
    res = float(np.linalg.norm(lyapunov_residual(P, A, C, E, F, prob.Lambda)))
    min_eig = float(np.linalg.eigvalsh(P)[0])
    if is_positive_definite(P):
        return StabilityVerdict(True, P, res, min_eig, "", advisory)
    return StabilityVerdict(False, P, res, min_eig,
                            f"P not positive definite (min eigenvalue {min_eig:.6g})",
                            advisory)


def closed_loop(spec, Theta):
    Theta = np.atleast_2d(np.asarray(Theta, dtype=float))
    if Theta.shape != (spec.m, spec.n):
        raise DimensionMismatch(f"Theta has shape {Theta.shape}, expected {(spec.m, spec.n)}",
                                operation="is_stabilizer")
    return spec.A + spec.B @ Theta, spec.C + spec.D @ Theta


def is_stabilizer(Theta, spec):
    """Whether ``u = Theta X`` makes the closed loop weighted L2-stable."""
    Acl, Ccl = closed_loop(spec, Theta)
    return is_weighted_stable(Acl, Ccl, spec.E, spec.F)


def decay_rate(A, C, E, F):
    """``-max Re`` of the weighted Lyapunov operator spectrum.

    Positive for weighted-stable ``[A, C]``; ``E[mu |Psi|^2]`` decays like
    ``exp(-decay_rate * s)``.
    """
    eig = np.linalg.eigvals(lyapunov_operator(A, C, E, F))
    return float(-eig.real.max())


# -- Monte Carlo oracle ---------------------------------------------------------

@dataclass
class OracleEstimate:
    P: np.ndarray
    se: np.ndarray
    T_max: float
    dt: float
    n_paths: int


def default_tmax(A, C, E, F, level=1e-6):
    """Horizon at which the mean integrand envelope drops below ``level``."""
    delta = decay_rate(A, C, E, F)
    if not delta > 0:
        raise DivergenceDetected("weighted Lyapunov operator is not Hurwitz",
                                 operation="lyapunov_mc_oracle", decay_rate=delta)
    return float(np.log(1 / level) / delta)


def _trapezoid_rows(v, dt):
    return dt * (v.sum(axis=1) - 0.5 * (v[:, 0] + v[:, -1]))


def lyapunov_mc_oracle(prob, n_paths=10_000, T_max=None, dt=1e-3, seed=0,
                       substeps=1, backend=None):
    """Monte Carlo estimate of ``P = E int_0^T mu(s) Psi(s)^T Lambda Psi(s) ds``.

    ``Psi`` is the fundamental solution of ``dPsi = A Psi ds + C Psi dW``,
    time-stepped by Euler-Maruyama; ``mu`` is evaluated exactly on the
    Brownian path.  Returns the entrywise mean with standard errors.
    """
    n = prob.n
    if T_max is None:
        T_max = default_tmax(prob.A, prob.C, prob.E, prob.F)
    K = int(round(T_max / dt))
    if K < 1:
        raise ValueError("T_max must be at least one step")
    rate = prob.E + prob.F ** 2 / 2

    def run(ids):
        dW = brownian_increments(seed, ids, K, dt, substeps)
        out, step = kernels.lyapunov_accumulate(prob.A, prob.C, prob.Lambda, dW, dt, rate,
                                                prob.F, DIVERGENCE_LEVEL, backend=backend)
        if step >= 0:
            raise DivergenceDetected(f"integrand exceeded {DIVERGENCE_LEVEL:g} at step {step}",
                                     operation="lyapunov_mc_oracle", step=step)
        return out

    per_path = np.concatenate(map_blocks(run, path_blocks(n_paths)))
    mean = per_path.mean(axis=0)
    se = per_path.std(axis=0, ddof=1) / np.sqrt(n_paths)
    return OracleEstimate((mean + mean.T) / 2, se, float(T_max), dt, n_paths)


# -- stabilizer search ----------------------------------------------------------

def _riccati_gain(spec, horizon_chunk=10.0, max_time=2000.0):
    """Gain from the steady state of the Riccati ODE with Q=I, S=0, R=I.

    Integrated forward from ``P = 0`` in transformed coordinates; the finite
    horizon value increases to the stabilizing solution when one exists.
    """
    n, m = spec.n, spec.m
    At, Ct = tilde_coefficients(spec.A, spec.C, spec.E, spec.F)
    Bt = spec.B - spec.F / 2 * spec.D
    Dt = spec.D
    iu = np.triu_indices(n)

    def rhs(_, y):
        P = y.reshape(n, n)
        P = (P + P.T) / 2
        K = Bt.T @ P + Dt.T @ P @ Ct
        dP = (P @ At + At.T @ P + Ct.T @ P @ Ct + np.eye(n)
              - K.T @ np.linalg.solve(np.eye(m) + Dt.T @ P @ Dt, K))
        return dP.ravel()

    def blowup(_, y):
        return DIVERGENCE_LEVEL - np.abs(y).max()
    blowup.terminal = True

    y = np.zeros(n * n)
    elapsed = 0.0
    while elapsed < max_time:
        sol = solve_ivp(rhs, (0.0, horizon_chunk), y, method="LSODA", rtol=1e-10,
                        atol=1e-12, events=blowup)
        if sol.status != 0:
            return None
        y = sol.y[:, -1]
        elapsed += horizon_chunk
        rate = np.abs(rhs(0, y)).max()
        if rate <= 1e-9 * max(1.0, np.abs(y).max()):
            break
    P = y.reshape(n, n)
    P = (P + P.T) / 2
    if not np.all(np.isfinite(P[iu])):
        return None
    K = Bt.T @ P + Dt.T @ P @ Ct
    return -np.linalg.solve(np.eye(m) + Dt.T @ P @ Dt, K)


def find_stabilizer(spec, max_iters=200, seed=0):
    """Some ``Theta`` with ``is_stabilizer(Theta, spec).stable``.

    Tries ``Theta = 0``, then the Riccati steady-state gain, then
    ``max_iters`` random gains at logarithmically spread scales.

    Raises
    ------
    NotFound
    """
    zero = np.zeros((spec.m, spec.n))
    if is_stabilizer(zero, spec).stable:
        return zero
    if np.any(spec.B) or np.any(spec.D):
        try:
            Theta = _riccati_gain(spec)
        except (np.linalg.LinAlgError, ValueError):
            Theta = None
        if Theta is not None and np.all(np.isfinite(Theta)) and is_stabilizer(Theta, spec).stable:
            return Theta
        rng = np.random.default_rng(seed)
        scales = np.logspace(-2, 3, max(max_iters, 1))
        for k in range(max_iters):
            Theta = scales[k] * rng.standard_normal((spec.m, spec.n))
            if is_stabilizer(Theta, spec).stable:
                return Theta
    raise NotFound("no weighted L2 stabilizer found", operation="find_stabilizer",
                   attempts=max_iters)
