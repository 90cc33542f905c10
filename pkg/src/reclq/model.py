"""Problem data: system and cost matrices, recursion constants, forcing signals.

A :class:`ProblemSpec` is immutable once built.  Construction checks shapes and
symmetrizes ``Q`` and ``R``; the hypothesis checks (positivity, stability,
integrability of the forcing signals) live in :func:`validate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    NonIntegrableSignal,
    NotPositiveDefinite,
    NotSymmetric,
    NotStabilizable,
    UnsupportedSignalKind,
)

SYMMETRY_RTOL = 1e-12
PIVOT_RTOL = 1e-12

SIGNAL_KINDS = ("zero", "constant", "piecewise_constant", "exp_decay")


def _frozen(a, shape=None, name="array"):
    arr = np.array(a, dtype=float)
    if shape is not None:
        if arr.size == int(np.prod(shape)) and arr.shape != shape:
            arr = arr.reshape(shape)
        if arr.shape != shape:
            raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}",
                                    operation="ProblemSpec")
    if not np.all(np.isfinite(arr)):
        raise DimensionMismatch(f"{name} has non-finite entries", operation="ProblemSpec")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DeterministicSignal:
    """Deterministic forcing ``s -> R^dim`` from a closed-form family.

    kind='zero'                 identically zero
    kind='constant'             ``value`` for all s
    kind='piecewise_constant'   ``values[i]`` on ``[breakpoints[i], breakpoints[i+1])``,
                                the last value holds on ``[breakpoints[-1], inf)`` and
                                must be zero; zero before ``breakpoints[0]``
    kind='exp_decay'            ``amplitude * exp(-rate * s)``, rate > 0
    """

    kind: str
    dim: int
    value: Optional[np.ndarray] = None
    breakpoints: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    amplitude: Optional[np.ndarray] = None
    rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise UnsupportedSignalKind(f"unknown signal kind {self.kind!r}",
                                        operation="DeterministicSignal")
        if self.kind == "piecewise_constant":
            bp = np.asarray(self.breakpoints, dtype=float)
            vals = np.asarray(self.values, dtype=float).reshape(len(bp), self.dim)
            if bp.ndim != 1 or len(bp) == 0 or np.any(np.diff(bp) <= 0):
                raise DimensionMismatch("breakpoints must be strictly increasing",
                                        operation="DeterministicSignal")
            if np.any(vals[-1] != 0.0):
                raise NonIntegrableSignal(
                    "piecewise_constant signal must vanish after its last breakpoint",
                    operation="DeterministicSignal")
            object.__setattr__(self, "breakpoints", _frozen(bp))
            object.__setattr__(self, "values", _frozen(vals))
        elif self.kind == "constant":
            object.__setattr__(self, "value", _frozen(self.value, (self.dim,), "value"))
        elif self.kind == "exp_decay":
            if self.rate is None or not self.rate > 0:
                raise NonIntegrableSignal("exp_decay requires a positive decay rate",
                                          operation="DeterministicSignal")
            object.__setattr__(self, "amplitude",
                               _frozen(self.amplitude, (self.dim,), "amplitude"))
            object.__setattr__(self, "rate", float(self.rate))

    # constructors ---------------------------------------------------------
    @classmethod
    def zero(cls, dim):
        return cls("zero", int(dim))

    @classmethod
    def constant(cls, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls("constant", value.size, value=value)

    @classmethod
    def piecewise_constant(cls, breakpoints, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls("piecewise_constant", values.shape[1],
                   breakpoints=breakpoints, values=values)

    @classmethod
    def exp_decay(cls, amplitude, rate):
        amplitude = np.atleast_1d(np.asarray(amplitude, dtype=float))
        return cls("exp_decay", amplitude.size, amplitude=amplitude, rate=rate)

    # evaluation -----------------------------------------------------------
    @property
    def is_zero(self):
        if self.kind == "zero":
            return True
        if self.kind == "constant":
            return not np.any(self.value)
        if self.kind == "exp_decay":
            return not np.any(self.amplitude)
        return not np.any(self.values)

    def __call__(self, s):
        s_arr = np.asarray(s, dtype=float)
        flat = np.atleast_1d(s_arr)
        if self.kind == "zero":
            out = np.zeros((flat.size, self.dim))
        elif self.kind == "constant":
            out = np.broadcast_to(self.value, (flat.size, self.dim)).copy()
        elif self.kind == "exp_decay":
            out = np.exp(-self.rate * flat)[:, None] * self.amplitude[None, :]
        else:
            idx = np.searchsorted(self.breakpoints, flat, side="right") - 1
            out = np.zeros((flat.size, self.dim))
            inside = idx >= 0
            out[inside] = self.values[idx[inside]]
        if s_arr.ndim == 0:
            return out[0]
        return out

    def to_record(self):
        """Plain-data form used by problem files."""
        if self.kind == "zero":
            return {"kind": "zero", "params": {"dim": self.dim}}
        if self.kind == "constant":
            return {"kind": "constant", "params": {"value": self.value.tolist()}}
        if self.kind == "exp_decay":
            return {"kind": "exp_decay",
                    "params": {"amplitude": self.amplitude.tolist(), "rate": self.rate}}
        return {"kind": "piecewise_constant",
                "params": {"breakpoints": self.breakpoints.tolist(),
                           "values": self.values.tolist()}}

    @classmethod
    def from_record(cls, rec, dim):
        if not isinstance(rec, dict) or "kind" not in rec:
            raise UnsupportedSignalKind(f"signal record must be {{kind, params}}, got {rec!r}",
                                        operation="DeterministicSignal")
        unknown = set(rec) - {"kind", "params"}
        if unknown:
            raise UnsupportedSignalKind(f"unknown signal fields {sorted(unknown)}",
                                        operation="DeterministicSignal")
        kind, params = rec["kind"], dict(rec.get("params") or {})
        if kind == "zero":
            sig = cls.zero(params.pop("dim", dim))
        elif kind == "constant":
            sig = cls.constant(params.pop("value"))
        elif kind == "piecewise_constant":
            sig = cls.piecewise_constant(params.pop("breakpoints"), params.pop("values"))
        elif kind == "exp_decay":
            sig = cls.exp_decay(params.pop("amplitude"), params.pop("rate"))
        else:
            raise UnsupportedSignalKind(f"unknown signal kind {kind!r}",
                                        operation="DeterministicSignal")
        if params:
            raise UnsupportedSignalKind(f"unknown params {sorted(params)} for {kind}",
                                        operation="DeterministicSignal")
        if sig.dim != dim:
            raise DimensionMismatch(f"{kind} signal has dim {sig.dim}, expected {dim}",
                                    operation="DeterministicSignal")
        return sig


def _as_signal(sig, dim, name):
    if sig is None:
        return DeterministicSignal.zero(dim)
    if not isinstance(sig, DeterministicSignal):
        sig = DeterministicSignal.constant(sig)
    if sig.dim != dim:
        raise DimensionMismatch(f"signal {name} has dim {sig.dim}, expected {dim}",
                                operation="ProblemSpec")
    return sig


def _symmetrized(M, name):
    scale = max(np.linalg.norm(M), 1.0)
    if np.linalg.norm(M - M.T) > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"{name} is not symmetric", operation="ProblemSpec")
    S = (M + M.T) / 2
    S.setflags(write=False)
    return S


@dataclass(frozen=True)
class ProblemSpec:
    """Infinite-horizon LQ problem with a recursive (exponentially weighted) cost.

    State ``dX = (AX + Bu + b)ds + (CX + Du + sigma)dW`` on ``[t0, inf)``,
    running cost ``<QX,X> + 2<SX,u> + <Ru,u> + 2<q,X> + 2<r,u>`` and recursion
    constants ``E`` (drift) and ``F`` (diffusion) of the cost BSDE.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: float
    F: float
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    q: DeterministicSignal = None
    r: DeterministicSignal = None
    b: DeterministicSignal = None
    sigma: DeterministicSignal = None
    t0: float = 0.0
    x0: np.ndarray = None
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        m = B.size // n if B.ndim < 2 else B.shape[1]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("n", n)
        set_("m", m)
        set_("A", _frozen(A, (n, n), "A"))
        set_("B", _frozen(B, (n, m), "B"))
        set_("C", _frozen(self.C, (n, n), "C"))
        set_("D", _frozen(self.D, (n, m), "D"))
        set_("S", _frozen(self.S, (m, n), "S"))
        set_("Q", _symmetrized(_frozen(self.Q, (n, n), "Q"), "Q"))
        set_("R", _symmetrized(_frozen(self.R, (m, m), "R"), "R"))
        for name in ("E", "F", "t0"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise DimensionMismatch(f"{name} must be finite", operation="ProblemSpec")
            set_(name, v)
        if self.t0 < 0:
            raise DimensionMismatch("t0 must be nonnegative", operation="ProblemSpec")
        set_("x0", _frozen(np.zeros(n) if self.x0 is None else self.x0, (n,), "x0"))
        set_("q", _as_signal(self.q, n, "q"))
        set_("r", _as_signal(self.r, m, "r"))
        set_("b", _as_signal(self.b, n, "b"))
        set_("sigma", _as_signal(self.sigma, n, "sigma"))

    @property
    def homogeneous(self):
        """True when q, r, b and sigma all vanish."""
        return all(sig.is_zero for sig in (self.q, self.r, self.b, self.sigma))

    @property
    def has_forcing(self):
        return not (self.b.is_zero and self.sigma.is_zero)

    def with_(self, **changes):
        """Copy with some fields replaced (re-runs construction checks)."""
        return replace(self, **changes)

    @classmethod
    def scalar(cls, A=0.0, B=1.0, C=0.0, D=0.0, E=2.0, F=0.0, Q=1.0, S=0.0, R=1.0,
               x0=1.0, **kw):
        """Convenience constructor for n = m = 1."""
        return cls(A=[[A]], B=[[B]], C=[[C]], D=[[D]], E=E, F=F, Q=[[Q]], S=[[S]], R=[[R]],
                   x0=[x0], **kw)


# -- positivity ---------------------------------------------------------------

def cholesky_min_pivot(M):
    """Smallest pivot ``l_kk**2`` of a Cholesky sweep; nonpositive means not PD.

    The sweep stops at the first nonpositive pivot and returns it.
    """
    M = np.array(M, dtype=float)
    n = M.shape[0]
    L = np.zeros_like(M)
    min_pivot = math.inf
    for k in range(n):
        pivot = M[k, k] - L[k, :k] @ L[k, :k]
        min_pivot = min(min_pivot, pivot)
        if pivot <= 0:
            return pivot
        L[k, k] = math.sqrt(pivot)
        L[k + 1:, k] = (M[k + 1:, k] - L[k + 1:, :k] @ L[k, :k]) / L[k, k]
    return min_pivot


def is_positive_definite(M, rtol=PIVOT_RTOL):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return True
    return cholesky_min_pivot(M) > rtol * np.linalg.norm(M)


def require_positive_definite(M, name, operation="validate"):
    if not is_positive_definite(M):
        min_eig = float(np.linalg.eigvalsh((M + M.T) / 2).min())
        raise NotPositiveDefinite(f"{name} is not positive definite (min eigenvalue {min_eig:.6g})",
                                  operation=operation, matrix=name, min_eig=min_eig)


# -- weighted integrability ----------------------------------------------------

def check_weighted_integrability(sig, E):
    """Whether ``int_0^inf exp(-E s) |sig(s)|^2 ds`` is finite.

    Deterministic signals only see the mean weight ``E[mu(s)] = exp(-E s)``, so
    the answer does not depend on F.
    """
    if not isinstance(sig, DeterministicSignal):
        raise UnsupportedSignalKind(f"cannot decide integrability of {type(sig).__name__}",
                                    operation="check_weighted_integrability")
    if sig.is_zero or sig.kind == "piecewise_constant":
        return True
    if sig.kind == "constant":
        return E > 0
    if sig.kind == "exp_decay":
        return E + 2 * sig.rate > 0
    raise UnsupportedSignalKind(sig.kind, operation="check_weighted_integrability")


# -- validation ----------------------------------------------------------------

@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    detail: str = ""
    value: Optional[float] = None


@dataclass
class ValidationReport:
    mode: str
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def get(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def holds(self, prefix):
        return all(c.passed for c in self.checks if c.name.startswith(prefix))

    def as_dict(self):
        return {"mode": self.mode, "passed": self.passed,
                "checks": [vars(c) for c in self.checks]}


def _pd_check(name, M):
    M = np.atleast_2d(M)
    min_eig = float(np.linalg.eigvalsh((M + M.T) / 2).min()) if M.size else math.inf
    ok = is_positive_definite(M)
    return HypothesisCheck(name, ok, "" if ok else "not positive definite", min_eig)


def validate(spec, mode="strict"):
    """Check the standing hypotheses for ``spec``.

    Strict mode raises on the first failure among the hard requirements
    (E > 0, F >= 0, Q, R and the Schur complement ``Q - S^T R^-1 S`` positive
    definite, integrable signals).  Permissive mode only enforces dimensions
    and integrability; everything is recorded in the report either way,
    including whether ``[A, C; B, D]`` is weighted stabilizable (H3) and
    whether ``Theta = 0`` already stabilizes it (the stability part of H4).
    """
    from . import stability

    if mode not in ("strict", "permissive"):
        raise ValueError(f"mode must be 'strict' or 'permissive', not {mode!r}")

    checks = [HypothesisCheck("H1.dimensions", True,
                              f"n={spec.n}, m={spec.m}")]

    for name in ("q", "r", "b", "sigma"):
        ok = check_weighted_integrability(getattr(spec, name), spec.E)
        checks.append(HypothesisCheck(f"H2.{name}_integrable", ok,
                                      "" if ok else f"{name} not in weighted L2 for E={spec.E}"))
    checks.append(HypothesisCheck("H2.E_positive", spec.E > 0, "", spec.E))
    checks.append(HypothesisCheck("H2.F_nonnegative", spec.F >= 0, "", spec.F))

    checks.append(_pd_check("H4.Q_pd", spec.Q))
    r_check = _pd_check("H4.R_pd", spec.R)
    checks.append(r_check)
    if r_check.passed:
        schur = spec.Q - spec.S.T @ np.linalg.solve(spec.R, spec.S)
        checks.append(_pd_check("H4.schur_pd", (schur + schur.T) / 2))
    else:
        checks.append(HypothesisCheck("H4.schur_pd", False, "R not invertible"))

    zero_verdict = stability.is_weighted_stable(spec.A, spec.C, spec.E, spec.F)
    checks.append(HypothesisCheck(
        "H4.zero_stabilizer", zero_verdict.stable, zero_verdict.reason,
        zero_verdict.min_eig_P))
    if zero_verdict.stable:
        checks.append(HypothesisCheck("H3.stabilizable", True, "Theta=0"))
    else:
        try:
            stability.find_stabilizer(spec, max_iters=200, seed=0)
            checks.append(HypothesisCheck("H3.stabilizable", True, "stabilizer found"))
        except Exception as exc:  # NotFound or a solver failure
            checks.append(HypothesisCheck("H3.stabilizable", False, str(exc)))

    report = ValidationReport(mode, checks)

    for c in checks:
        if c.name.startswith("H2.") and c.name.endswith("_integrable") and not c.passed:
            raise NonIntegrableSignal(c.detail, operation="validate", report=report)
    if mode == "strict":
        for c in checks:
            if c.passed:
                continue
            if c.name in ("H4.Q_pd", "H4.R_pd", "H4.schur_pd"):
                label = {"H4.Q_pd": "Q", "H4.R_pd": "R",
                         "H4.schur_pd": "Q - S^T R^-1 S"}[c.name]
                raise NotPositiveDefinite(
                    f"{label} is not positive definite (min eigenvalue {c.value:.6g})"
                    if c.value is not None else f"{label} is not positive definite",
                    operation="validate", matrix=label, min_eig=c.value, report=report)
            if c.name == "H2.E_positive":
                raise NotPositiveDefinite(f"E must be positive, got {spec.E}",
                                          operation="validate", matrix="E", min_eig=spec.E,
                                          report=report)
            if c.name == "H2.F_nonnegative":
                raise NotPositiveDefinite(f"F must be nonnegative, got {spec.F}",
                                          operation="validate", matrix="F", min_eig=spec.F,
                                          report=report)
            if c.name == "H3.stabilizable":
                raise NotStabilizable(f"no weighted L2 stabilizer: {c.detail}",
                                      operation="validate", report=report)
    return report
