"""Monte Carlo simulation and verification for the weighted LQ problem.

State paths are time-stepped by Euler-Maruyama (with the scalar-noise Milstein
correction when pathwise comparisons with the transformed system need strong
order one) on a uniform grid; the weight ``mu`` is always evaluated exactly
from the Brownian path.  Paths are processed in fixed blocks so memory stays
bounded and every reduction is independent of the worker count.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import (HorizonRequired, NonIntegrableTail, NumericalBlowup,
                     OptimalityViolated)
from .parallel import map_blocks, path_blocks
from .stability import is_weighted_stable
from .transform import map_adjoint, map_state_control_path, to_classical
from .weight import brownian_increments

SCHEMES = ("auto", "euler", "milstein")


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    ``substeps`` draws the Brownian path on a grid ``substeps`` times finer
    and sums the increments, so runs at ``(dt, 2)`` and ``(dt/2, 1)`` share
    their Brownian paths (common random numbers across step sizes).
    ``scheme='auto'`` adds the Milstein correction when ``F != 0``.
    """

    T_max: float = 8.0
    dt: float = 1e-3
    n_paths: int = 1000
    seed: int = 0
    antithetic: bool = False
    substeps: int = 1
    scheme: str = "auto"
    keep_paths: int = 16
    block: int = 256

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T_max >= 10 * self.dt * (1 - 1e-12):
            raise ValueError("T_max must be at least 10 dt")
        if self.n_paths < 2:
            raise ValueError("n_paths must be at least 2")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if self.substeps < 1:
            raise ValueError("substeps must be a positive integer")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")

    @property
    def n_steps(self):
        return int(round(self.T_max / self.dt))

    def grid(self, t0=0.0):
        return t0 + self.dt * np.arange(self.n_steps + 1)

    def milstein(self, spec):
        return self.scheme == "milstein" or (self.scheme == "auto" and spec.F != 0)

    def with_(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- controls ---------------------------------------------------------------------

@dataclass(frozen=True)
class ControlLaw:
    """``u(s) = Theta X(s) + v(s) + u_open(s)``.

    ``v`` is a deterministic callable of time returning ``(len(s), m)`` for an
    array ``s``; ``u_open`` is an array of shape ``(K + 1, m)`` (shared) or
    ``(n_paths, K + 1, m)`` (per path, indexed by path id).
    """

    kind: str
    Theta: np.ndarray | None = None
    v: object = None
    u_open: np.ndarray | None = None

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def feedback(cls, Theta, v=None):
        return cls("feedback", np.atleast_2d(np.asarray(Theta, dtype=float)), v)

    @classmethod
    def open_loop(cls, u_path):
        return cls("open_loop", u_open=np.asarray(u_path, dtype=float))

    @classmethod
    def closed_loop(cls, synthesis):
        return cls.feedback(synthesis.Theta_bar, synthesis.vbar)

    def gain(self, spec):
        return np.zeros((spec.m, spec.n)) if self.Theta is None else self.Theta

    def offset(self, spec, t, ids):
        """Deterministic plus open-loop offsets, shape ``(P or 1, K + 1, m)``."""
        out = np.zeros((1, t.size, spec.m))
        if self.v is not None:
            out = out + np.asarray(self.v(t)).reshape(1, t.size, spec.m)
        if self.u_open is not None:
            per_path = self.u_open.ndim == 3
            u = self.u_open[ids] if per_path else self.u_open[None]
            if u.shape[1] != t.size:
                raise ValueError("open-loop control is not on the simulation grid")
            out = out + u
        return out


@dataclass(frozen=True)
class Perturbation:
    """Piecewise-constant control perturbation with an ``exp(-(s - t0))`` envelope."""

    t0: float
    interval: float
    levels: np.ndarray  # (pieces, m)

    @classmethod
    def random(cls, m, t0, horizon, seed, index, interval=0.5):
        rng = np.random.default_rng([int(seed), 7919, int(index)])
        pieces = int(np.ceil(horizon / interval)) + 1
        return cls(t0, interval, rng.standard_normal((pieces, m)))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        k = np.clip(((s - self.t0) // self.interval).astype(int), 0, len(self.levels) - 1)
        return self.levels[k] * np.exp(-(s - self.t0))[..., None]


@dataclass(frozen=True)
class ShiftedOffset:
    """``v(s) + eps * w(s)``."""

    base: object
    eps: float
    pert: object

    def __call__(self, s):
        out = self.eps * self.pert(s)
        return out if self.base is None else out + self.base(s)


# -- path ensembles ---------------------------------------------------------------

@dataclass
class PathEnsemble:
    t: np.ndarray
    X: np.ndarray   # (P, K + 1, n)
    u: np.ndarray   # (P, K + 1, m)
    W: np.ndarray   # (P, K + 1)
    path_ids: np.ndarray

    def mu_ratio(self, spec):
        return np.exp(log_mu(spec, self.t, self.W))

    def nu(self, spec):
        return -(2 * spec.E + spec.F ** 2) / 4 * (self.t - self.t[0]) - spec.F / 2 * self.W

    def to_csv(self, path, spec):
        """Columns ``path_id, s, X_1..X_n, u_1..u_m, mu_ratio, running_cost``.

        ``running_cost`` is the cumulative weighted cost up to ``s``.
        """
        mu = self.mu_ratio(spec)
        f = running_integrand(spec, self.t, self.X, self.u)
        g = mu * f
        dt = np.diff(self.t)
        run = np.concatenate([np.zeros((len(g), 1)),
                              np.cumsum(0.5 * dt * (g[:, 1:] + g[:, :-1]), axis=1)], axis=1)
        P, K1 = self.W.shape
        cols = [np.repeat(self.path_ids, K1)[:, None], np.tile(self.t, P)[:, None],
                self.X.reshape(P * K1, -1), self.u.reshape(P * K1, -1),
                mu.reshape(-1, 1), run.reshape(-1, 1)]
        n, m = self.X.shape[2], self.u.shape[2]
        header = ",".join(["path_id", "s"] + [f"X_{i + 1}" for i in range(n)]
                          + [f"u_{j + 1}" for j in range(m)] + ["mu_ratio", "running_cost"])
        np.savetxt(path, np.hstack(cols), delimiter=",", header=header, comments="",
                   fmt=["%d"] + ["%.17g"] * (1 + n + m + 2))


def log_mu(spec, t, W):
    """``log(mu(s)/mu(t0))`` on the grid, from the cumulative Brownian path."""
    return -(spec.E + spec.F ** 2 / 2) * (t - t[0]) - spec.F * W


def running_integrand(spec, t, X, u, q=None, r=None):
    """``<QX,X> + 2<SX,u> + <Ru,u> + 2<q,X> + 2<r,u>`` on the grid.

    ``q``/``r`` default to the spec's signals evaluated on ``t``; arrays of
    shape ``(P, K + 1, dim)`` may be passed for pathwise linear terms.
    """
    q = spec.q(t) if q is None else q
    r = spec.r(t) if r is None else r
    return (np.einsum("pki,ij,pkj->pk", X, spec.Q, X)
            + 2 * np.einsum("pki,ij,pkj->pk", u, spec.S, X)
            + np.einsum("pki,ij,pkj->pk", u, spec.R, u)
            + 2 * np.sum(q * X, axis=-1) + 2 * np.sum(r * u, axis=-1))


def _trapezoid(v, dt):
    return dt * (v[..., 1:].sum(axis=-1) + v[..., :-1].sum(axis=-1)) / 2


def _simulate_block(spec, law, cfg, ids, dW=None):
    K, dt = cfg.n_steps, cfg.dt
    t = cfg.grid(spec.t0)
    if dW is None:
        dW = brownian_increments(cfg.seed, ids, K, dt, cfg.substeps, cfg.antithetic)
    Theta = law.gain(spec)
    off = law.offset(spec, t, ids)                     # (P or 1, K+1, m)
    drift = off[:, :-1] @ spec.B.T + spec.b(t[:-1])[None]
    diff = off[:, :-1] @ spec.D.T + spec.sigma(t[:-1])[None]
    X, step = kernels.euler_affine(spec.x0, spec.A + spec.B @ Theta, spec.C + spec.D @ Theta,
                                   drift, diff, dW, dt, cfg.milstein(spec))
    if step >= 0:
        raise NumericalBlowup(f"|X| exceeded 1e12 at step {step} (s={t[step]:.6g})",
                              operation="simulate_state", step=int(step))
    u = X @ Theta.T + off
    W = np.concatenate([np.zeros((len(ids), 1)), np.cumsum(dW, axis=1)], axis=1)
    return PathEnsemble(t, X, u, W, np.asarray(ids))


def simulate_state(spec, control_law, cfg, path_ids=None):
    """Simulate the controlled state for the given paths (default: all).

    Every path is a pure function of ``(cfg.seed, path_index, grid)``.
    """
    ids = np.arange(cfg.n_paths) if path_ids is None else np.asarray(path_ids)
    parts = map_blocks(lambda b: _simulate_block(spec, control_law, cfg, b),
                       path_blocks(len(ids), cfg.block) if path_ids is None else [ids])
    if len(parts) == 1:
        return parts[0]
    return PathEnsemble(parts[0].t, np.concatenate([p.X for p in parts]),
                        np.concatenate([p.u for p in parts]),
                        np.concatenate([p.W for p in parts]),
                        np.concatenate([p.path_ids for p in parts]))


# -- cost estimation -------------------------------------------------------------

@dataclass
class SimulationReport:
    cost_mean: float
    cost_se: float
    tail_bound: float
    weighted_state_norm: float
    weighted_norm_increment: float
    stationarity_rms: float | None = None
    paths_summary: dict = field(default_factory=dict)
    per_path_cost: np.ndarray | None = field(default=None, repr=False)
    ensemble: PathEnsemble | None = field(default=None, repr=False)
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        out = {"cost_mean": self.cost_mean, "cost_se": self.cost_se,
               "tail_bound": self.tail_bound,
               "weighted_state_norm": self.weighted_state_norm,
               "weighted_norm_increment": self.weighted_norm_increment,
               "stationarity_rms": self.stationarity_rms,
               "paths_summary": self.paths_summary}
        out.update(self.extras)
        return out


def mean_and_se(values, antithetic):
    """Sample mean and standard error; antithetic pairs are averaged first."""
    values = np.asarray(values, dtype=float)
    units = values.reshape(-1, 2, *values.shape[1:]).mean(axis=1) if antithetic else values
    n = len(units)
    return units.mean(axis=0), units.std(axis=0, ddof=1) / np.sqrt(n)


def closed_loop_decay(spec, Theta):
    """Decay rate ``1 / lambda_max(P)`` from the Lyapunov certificate, or None."""
    verdict = is_weighted_stable(spec.A + spec.B @ Theta, spec.C + spec.D @ Theta,
                                 spec.E, spec.F)
    if not verdict.stable:
        return None
    return float(1.0 / np.linalg.eigvalsh(verdict.P)[-1])


def tail_slope(t, envelope):
    """Least-squares slope of ``log envelope`` over the last quarter of the grid."""
    lo = int(0.75 * (len(t) - 1))
    tt, ee = t[lo:], envelope[lo:]
    keep = ee > 0
    if keep.sum() < 2:
        return -np.inf
    return float(np.polyfit(tt[keep], np.log(ee[keep]), 1)[0])


def estimate_cost(spec, control_law, cfg, keep_paths=None, check_tail=True):
    """Monte Carlo estimate of the weighted cost of ``control_law``.

    Each path contributes the trapezoidal integral of ``mu-ratio * f`` on the
    grid.  The tail beyond ``T_max`` is bounded by
    ``mean(mu |f|)(T_max) / delta`` with ``delta = 1/lambda_max(P)`` from the
    closed-loop Lyapunov certificate (or the observed log-slope when the
    closed loop has no certificate).

    Raises
    ------
    NonIntegrableTail
        The mean weighted integrand does not decay over the last quarter.
    NumericalBlowup
    """
    keep = cfg.keep_paths if keep_paths is None else keep_paths
    dt = cfg.dt

    def run(ids):
        ens = _simulate_block(spec, control_law, cfg, ids)
        mu = ens.mu_ratio(spec)
        g = mu * running_integrand(spec, ens.t, ens.X, ens.u)
        xn = mu * np.einsum("pki,pki->pk", ens.X, ens.X)
        half = len(ens.t) // 2
        return {"cost": _trapezoid(g, dt), "norm": _trapezoid(xn, dt),
                "norm_late": _trapezoid(xn[:, half:], dt),
                "abs_sum": np.abs(g).sum(axis=0),
                "ens": ens if ids[0] < keep else None}

    parts = map_blocks(run, path_blocks(cfg.n_paths, cfg.block))
    cost = np.concatenate([p["cost"] for p in parts])
    norm = np.concatenate([p["norm"] for p in parts])
    norm_late = np.concatenate([p["norm_late"] for p in parts])
    envelope = np.sum([p["abs_sum"] for p in parts], axis=0) / cfg.n_paths
    t = cfg.grid(spec.t0)

    mean, se = mean_and_se(cost, cfg.antithetic)
    slope = tail_slope(t, envelope)
    if check_tail and envelope.any() and slope >= 0:
        raise NonIntegrableTail(
            f"mean weighted integrand does not decay (log-slope {slope:.3g} over the "
            f"last quarter of [0, {cfg.T_max}])", operation="estimate_cost", slope=slope)
    delta = closed_loop_decay(spec, control_law.gain(spec))
    if delta is None:
        delta = -slope if slope < 0 else np.inf
    tail = float(envelope[-1] / delta) if envelope[-1] > 0 else 0.0

    ens = [p["ens"] for p in parts if p["ens"] is not None]
    ensemble = None
    if keep > 0 and ens:
        e0 = ens[0]
        ensemble = PathEnsemble(e0.t, e0.X[:keep], e0.u[:keep], e0.W[:keep], e0.path_ids[:keep])
    return SimulationReport(
        cost_mean=float(mean), cost_se=float(se), tail_bound=tail,
        weighted_state_norm=float(norm.mean()),
        weighted_norm_increment=float(norm_late.mean()),
        paths_summary={"n_paths": cfg.n_paths, "n_steps": cfg.n_steps, "dt": dt,
                       "T_max": cfg.T_max, "antithetic": cfg.antithetic,
                       "scheme": "milstein" if cfg.milstein(spec) else "euler",
                       "backend": kernels.BACKEND, "tail_slope": slope,
                       "tail_decay_rate": delta},
        per_path_cost=cost, ensemble=ensemble)


# -- BSDE representation ----------------------------------------------------------

def bsde_backward(f, t, W, E, F, xi=None):
    """Per-path ``Y(t0)`` from the backward recursion of the linear BSDE.

    ``Y_k = rho_k Y_{k+1} + dt/2 (f_k + rho_k f_{k+1})`` with
    ``rho_k = mu(s_{k+1}) / mu(s_k)`` and ``Y_K = xi``.
    """
    f = np.atleast_2d(f)
    dt = np.diff(t)
    rho = np.exp(-(E + F * F / 2) * dt - F * np.diff(W, axis=1))
    Y = np.zeros(len(f)) if xi is None else np.asarray(xi, dtype=float).copy()
    for k in range(len(t) - 2, -1, -1):
        Y = rho[:, k] * Y + dt[k] / 2 * (f[:, k] + rho[:, k] * f[:, k + 1])
    return Y


def evaluate_bsde_representation(spec, ensemble, G=None, g=None, finite_horizon=False,
                                 antithetic=False):
    """Monte Carlo value of ``Y(t)`` for the running cost of ``ensemble``.

    The terminal value ``xi = <G X(T), X(T)> + 2 <g, X(T)>`` is only allowed
    on a finite horizon; the infinite-horizon cost (truncated at the grid end)
    requires ``G = 0`` and ``g = 0``.

    Returns ``(mean, se, per_path)``.
    """
    n = spec.n
    G = np.zeros((n, n)) if G is None else np.atleast_2d(G)
    g = np.zeros(n) if g is None else np.atleast_1d(g)
    if not finite_horizon and (np.any(G) or np.any(g)):
        raise HorizonRequired("terminal cost needs a finite horizon",
                              operation="evaluate_bsde_representation")
    XT = ensemble.X[:, -1]
    xi = np.einsum("pi,ij,pj->p", XT, G, XT) + 2 * XT @ g
    f = running_integrand(spec, ensemble.t, ensemble.X, ensemble.u)
    Y = bsde_backward(f, ensemble.t, ensemble.W, spec.E, spec.F, xi)
    mean, se = mean_and_se(Y, antithetic)
    return float(mean), float(se), Y


def forward_cost(spec, ensemble, G=None, g=None):
    """Per-path forward trapezoid of ``mu-ratio f`` plus the weighted terminal term."""
    mu = ensemble.mu_ratio(spec)
    f = running_integrand(spec, ensemble.t, ensemble.X, ensemble.u)
    out = _trapezoid(mu * f, ensemble.t[1] - ensemble.t[0])
    if G is not None or g is not None:
        n = spec.n
        G = np.zeros((n, n)) if G is None else np.atleast_2d(G)
        g = np.zeros(n) if g is None else np.atleast_1d(g)
        XT = ensemble.X[:, -1]
        out = out + mu[:, -1] * (np.einsum("pi,ij,pj->p", XT, G, XT) + 2 * XT @ g)
    return out


# -- transformed system -----------------------------------------------------------

def _nu(spec, t, W):
    return -(2 * spec.E + spec.F ** 2) / 4 * (t - t[0]) - spec.F / 2 * W


def simulate_tilde(spec, Theta, v, cfg, ids, dW):
    """Transformed closed loop ``u_t = Theta X_t + exp(nu) v`` on the same increments.

    Returns ``(Xt, ut, nu)``.  The offset ``exp(nu) v`` is path dependent.
    """
    ts = to_classical(spec)
    t = cfg.grid(spec.t0)
    W = np.concatenate([np.zeros((len(ids), 1)), np.cumsum(dW, axis=1)], axis=1)
    nu = _nu(spec, t, W)
    vt = np.exp(nu)[:, :, None] * (np.zeros((1, t.size, spec.m)) if v is None
                                   else np.asarray(v(t)).reshape(1, t.size, spec.m))
    Xt, step = kernels.euler_affine(spec.x0, ts.At + ts.Bt @ Theta, ts.Ct + ts.Dt @ Theta,
                                    vt[:, :-1] @ ts.Bt.T, vt[:, :-1] @ ts.Dt.T, dW, cfg.dt,
                                    cfg.milstein(spec))
    if step >= 0:
        raise NumericalBlowup(f"transformed state blew up at step {step}",
                              operation="simulate_tilde", step=int(step))
    return Xt, Xt @ Theta.T + vt, nu


def sde_consistency(spec, Theta, cfg, horizon=1.0, v=None):
    """RMS over paths of ``sup_{s <= horizon} |Xt(s) - exp(nu) X(s)|``.

    ``Xt`` is simulated from the transformed SDE with the same increments as
    ``X``; the gap is pure discretization error.
    """
    law = ControlLaw.feedback(Theta, v)
    kmax = int(round(horizon / cfg.dt))

    def run(ids):
        dW = brownian_increments(cfg.seed, ids, cfg.n_steps, cfg.dt, cfg.substeps,
                                 cfg.antithetic)
        ens = _simulate_block(spec, law, cfg, ids, dW)
        Xt, _, nu = simulate_tilde(spec, law.gain(spec), v, cfg, ids, dW)
        mapped, _ = map_state_control_path(ens.X, ens.u, nu)
        gap = np.linalg.norm(Xt[:, :kmax + 1] - mapped[:, :kmax + 1], axis=-1)
        return gap.max(axis=1)

    sup = np.concatenate(map_blocks(run, path_blocks(cfg.n_paths, cfg.block)))
    return float(np.sqrt(np.mean(sup ** 2)))


def cost_equivalence(spec, ensemble):
    """Max relative gap between the weighted and transformed running integrands.

    The weighted integrand is ``mu-ratio f(X, u, q, r)``; the transformed one is
    ``f(Xt, ut, qt, rt)`` with every factor multiplied by ``exp(nu)``.
    """
    t = ensemble.t
    mu = ensemble.mu_ratio(spec)
    f = running_integrand(spec, t, ensemble.X, ensemble.u)
    weighted = mu * f
    nu = ensemble.nu(spec)
    Xt, ut = map_state_control_path(ensemble.X, ensemble.u, nu)
    en = np.exp(nu)[:, :, None]
    ft = running_integrand(spec, t, Xt, ut, q=en * spec.q(t)[None], r=en * spec.r(t)[None])
    scale = np.maximum(np.abs(weighted), np.finfo(float).tiny)
    terms = (mu * (np.abs(np.einsum("pki,ij,pkj->pk", ensemble.X, spec.Q, ensemble.X))
                   + np.abs(np.einsum("pki,ij,pkj->pk", ensemble.u, spec.R, ensemble.u))))
    scale = np.maximum(scale, terms)
    return float(np.max(np.abs(weighted - ft) / np.where(scale > 0, scale, 1.0))), weighted, ft


# -- stationarity -----------------------------------------------------------------

def stationarity_residual(spec, synthesis, cfg, Theta=None):
    """RMS of ``(B - F D)^T Y + D^T Z + S X + R u + r`` along closed-loop paths.

    ``X`` follows the original closed loop ``u = Theta X + vbar``.  The adjoint
    pair is built in transformed coordinates from the Riccati data,
    ``Yt = P Xt + exp(nu) eta`` and ``Zt = P (Ct Xt + Dt ut) - (F/2) exp(nu) eta``,
    with ``Xt`` simulated from the transformed SDE on the same increments,
    and mapped back with :func:`map_adjoint`.  With ``Theta = Theta_bar`` the
    residual vanishes up to discretization error.

    The report's ``extras`` carry ``scale``, the larger RMS of the two halves
    ``S X + R u + r`` and ``(B - F D)^T Y + D^T Z``.
    """
    if not (spec.b.is_zero and spec.sigma.is_zero):
        raise ValueError("stationarity check needs b = sigma = 0; reduce the problem first")
    Theta = synthesis.Theta_bar if Theta is None else np.atleast_2d(Theta)
    P = synthesis.P
    ts = to_classical(spec)
    BF = spec.B - spec.F * spec.D
    law = ControlLaw.feedback(Theta, synthesis.vbar)
    t = cfg.grid(spec.t0)
    eta = synthesis.eta(t)
    r_t = spec.r(t)

    def run(ids):
        dW = brownian_increments(cfg.seed, ids, cfg.n_steps, cfg.dt, cfg.substeps,
                                 cfg.antithetic)
        ens = _simulate_block(spec, law, cfg, ids, dW)
        Xt, ut, nu = simulate_tilde(spec, Theta, synthesis.vbar, cfg, ids, dW)
        eta_t = np.exp(nu)[:, :, None] * eta[None]
        Yt = Xt @ P.T + eta_t
        Zt = (Xt @ ts.Ct.T + ut @ ts.Dt.T) @ P.T - spec.F / 2 * eta_t
        Y, Z = map_adjoint(Yt, Zt, -nu, spec.F)
        adj = Y @ BF + Z @ spec.D
        own = ens.X @ spec.S.T + ens.u @ spec.R.T + r_t[None]
        res = adj + own
        return (np.sum(res ** 2, axis=(1, 2)), np.sum(own ** 2, axis=(1, 2)),
                np.sum(adj ** 2, axis=(1, 2)))

    parts = map_blocks(run, path_blocks(cfg.n_paths, cfg.block))
    count = cfg.n_paths * t.size
    rms = float(np.sqrt(sum(p[0].sum() for p in parts) / count))
    own = float(np.sqrt(sum(p[1].sum() for p in parts) / count))
    adj = float(np.sqrt(sum(p[2].sum() for p in parts) / count))
    scale = max(own, adj)
    return SimulationReport(
        cost_mean=float("nan"), cost_se=float("nan"), tail_bound=0.0,
        weighted_state_norm=float("nan"), weighted_norm_increment=float("nan"),
        stationarity_rms=rms,
        paths_summary={"n_paths": cfg.n_paths, "dt": cfg.dt, "T_max": cfg.T_max,
                       "scheme": "milstein" if cfg.milstein(spec) else "euler"},
        extras={"scale": scale, "rms_control_part": own, "rms_adjoint_part": adj,
                "normalized": rms / (cfg.dt * scale) if scale > 0 else 0.0})


# -- optimality probe -------------------------------------------------------------

@dataclass
class ProbeReport:
    eps: tuple
    delta_J: np.ndarray      # (n_perturbations, len(eps))
    delta_se: np.ndarray
    r_squared: np.ndarray    # (n_perturbations,)
    curvature: np.ndarray    # fitted a in delta_J = a eps^2
    symmetry_gap: np.ndarray  # (J(+) - J(-)) at the largest eps
    symmetry_se: np.ndarray
    violations: list
    base_cost: float
    base_se: float

    @property
    def passed(self):
        return not self.violations and bool(np.all(self.r_squared > 0.9))

    def as_dict(self):
        return {"eps": list(self.eps), "delta_J": self.delta_J.tolist(),
                "delta_se": self.delta_se.tolist(), "r_squared": self.r_squared.tolist(),
                "min_r_squared": float(self.r_squared.min()),
                "curvature": self.curvature.tolist(),
                "symmetry_gap": self.symmetry_gap.tolist(),
                "symmetry_se": self.symmetry_se.tolist(),
                "violations": self.violations, "base_cost": self.base_cost,
                "base_se": self.base_se, "passed": self.passed}


def _r_squared_origin(x, y):
    """Fit ``y = a x`` and return ``(a, R^2)``; ``R^2`` uses the centred total sum."""
    a = float(x @ y / (x @ x))
    ss_res = float(np.sum((y - a * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return a, 1.0 if ss_res == 0.0 else 0.0
    return a, 1.0 - ss_res / ss_tot


def optimality_probe(spec, synthesis, cfg, n_perturbations=20, eps=(0.05, 0.1, 0.2),
                     seed=0, raise_on_violation=True):
    """Perturb the optimal control and check the cost never drops.

    Each perturbation ``w`` is piecewise constant on intervals of length 0.5
    with standard normal levels and an ``exp(-(s - t0))`` envelope.  The
    control ``Theta_bar X + vbar + eps w`` is compared against the optimum on
    common random numbers; ``J(eps) - J(0) >= -3 SE`` must hold and the
    differences must be quadratic in ``eps`` (``R^2 > 0.9``).  The report also
    carries ``J(+eps w) - J(-eps w)`` at the largest ``eps`` (zero at the
    optimum up to noise).

    Raises
    ------
    OptimalityViolated
    """
    eps = tuple(float(e) for e in eps)
    quiet = cfg.with_(keep_paths=0)
    base = estimate_cost(spec, ControlLaw.closed_loop(synthesis), quiet, check_tail=False)
    J0 = base.per_path_cost
    dJ = np.zeros((n_perturbations, len(eps)))
    dse = np.zeros_like(dJ)
    sym = np.zeros(n_perturbations)
    sym_se = np.zeros(n_perturbations)
    violations = []
    for j in range(n_perturbations):
        w = Perturbation.random(spec.m, spec.t0, cfg.T_max, seed, j)
        costs = {}
        for e in eps + (-eps[-1],):
            law = ControlLaw.feedback(synthesis.Theta_bar, ShiftedOffset(synthesis.vbar, e, w))
            costs[e] = estimate_cost(spec, law, quiet, check_tail=False).per_path_cost
        for i, e in enumerate(eps):
            dJ[j, i], dse[j, i] = mean_and_se(costs[e] - J0, cfg.antithetic)
            if dJ[j, i] < -3 * dse[j, i]:
                violations.append({"perturbation": j, "eps": e, "delta_J": dJ[j, i],
                                   "se": dse[j, i]})
        sym[j], sym_se[j] = mean_and_se(costs[eps[-1]] - costs[-eps[-1]], cfg.antithetic)
    x = np.square(eps)
    fits = [_r_squared_origin(x, dJ[j]) for j in range(n_perturbations)]
    report = ProbeReport(eps, dJ, dse, np.array([f[1] for f in fits]),
                         np.array([f[0] for f in fits]), sym, sym_se, violations,
                         base.cost_mean, base.cost_se)
    if violations and raise_on_violation:
        v = violations[0]
        raise OptimalityViolated(
            f"{len(violations)} perturbation(s) lowered the cost, e.g. perturbation "
            f"{v['perturbation']} at eps={v['eps']}: delta_J={v['delta_J']:.3g} < "
            f"-3 SE ({-3 * v['se']:.3g})", operation="optimality_probe", report=report)
    return report


# -- nonhomogeneous reduction ------------------------------------------------------

@dataclass
class ReductionReport:
    phi: float
    phi_se: float
    t: np.ndarray
    X_hat: np.ndarray      # (keep, K + 1, n)
    q_hat: np.ndarray      # (keep, K + 1, n)
    r_hat: np.ndarray      # (keep, K + 1, m)
    superposition_error: float
    path_ids: np.ndarray

    def as_dict(self):
        return {"phi": self.phi, "phi_se": self.phi_se,
                "superposition_error": self.superposition_error,
                "kept_paths": len(self.path_ids)}


def reduce_nonhomogeneous(spec, cfg, control_law=None, keep_paths=16):
    """Split off the forcing ``b``, ``sigma`` from the state.

    ``X_hat`` solves the forced equation from ``x = 0`` with ``u = 0``.  The
    control-independent offset ``phi = E int mu-ratio (<Q X_hat, X_hat> +
    2 <q, X_hat>)`` is estimated with its standard error, the pathwise linear
    terms ``q_hat = q + Q X_hat`` and ``r_hat = r + S X_hat`` are returned for
    the first ``keep_paths`` paths, and superposition
    ``X = X_0 + X_hat`` is checked on the same increments, where ``X_0`` is
    the unforced state driven by the same control path.
    """
    law = ControlLaw.zero() if control_law is None else control_law
    hat_spec = spec.with_(x0=np.zeros(spec.n))
    free_spec = spec.with_(b=None, sigma=None)
    t = cfg.grid(spec.t0)
    q_t, r_t = spec.q(t), spec.r(t)
    n_check = min(keep_paths, cfg.n_paths) if keep_paths else min(16, cfg.n_paths)

    def run(ids):
        dW = brownian_increments(cfg.seed, ids, cfg.n_steps, cfg.dt, cfg.substeps,
                                 cfg.antithetic)
        hat = _simulate_block(hat_spec, ControlLaw.zero(), cfg, ids, dW)
        mu = hat.mu_ratio(spec)
        g = mu * (np.einsum("pki,ij,pkj->pk", hat.X, spec.Q, hat.X)
                  + 2 * np.sum(q_t[None] * hat.X, axis=-1))
        out = {"phi": _trapezoid(g, cfg.dt), "hat": None, "err": 0.0}
        sel = ids < n_check
        if sel.any():
            sub, dsub = ids[sel], dW[sel]
            full = _simulate_block(spec, law, cfg, sub, dsub)
            zero = _simulate_block(free_spec, ControlLaw.open_loop(full.u), cfg,
                                   np.arange(len(sub)), dsub)
            diff = full.X - zero.X - hat.X[sel]
            scale = max(np.abs(full.X).max(), np.abs(hat.X[sel]).max(), 1.0)
            out["err"] = float(np.abs(diff).max() / scale)
            out["hat"] = (sub, hat.X[sel])
        return out

    parts = map_blocks(run, path_blocks(cfg.n_paths, cfg.block))
    phi_paths = np.concatenate([p["phi"] for p in parts])
    phi, phi_se = mean_and_se(phi_paths, cfg.antithetic)
    kept = [p["hat"] for p in parts if p["hat"] is not None]
    ids = np.concatenate([k[0] for k in kept])[:keep_paths]
    X_hat = np.concatenate([k[1] for k in kept])[:keep_paths]
    return ReductionReport(
        phi=float(phi), phi_se=float(phi_se), t=t, X_hat=X_hat,
        q_hat=q_t[None] + X_hat @ spec.Q.T, r_hat=r_t[None] + X_hat @ spec.S.T,
        superposition_error=max(p["err"] for p in parts), path_ids=ids)
