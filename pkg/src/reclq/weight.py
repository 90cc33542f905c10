"""Weight process ``mu(s) = exp(-E s - F^2 s / 2 - F W(s))`` and Brownian grids.

All weight evaluations use the closed-form exponential of the Brownian
increment; the weight SDE is never time-stepped.  Long products of ratios are
accumulated in log space.

Random numbers follow a stream-splittable contract: base path ``i`` reads row
``i % STREAM_BLOCK`` of the normal block drawn from
``SeedSequence(seed, spawn_key=(i // STREAM_BLOCK,))``.  A path is therefore a
pure function of ``(seed, path_index, grid)`` whatever the worker layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonpositiveE

STREAM_BLOCK = 64


@dataclass(frozen=True)
class WeightParams:
    E: float
    F: float

    def __post_init__(self):
        if not (np.isfinite(self.E) and np.isfinite(self.F)):
            raise ValueError("E and F must be finite")

    @classmethod
    def of(cls, spec):
        return cls(spec.E, spec.F)


def log_mu_ratio(s, t, W_increment, params):
    """``log(mu(s)/mu(t))``; broadcasts over array arguments."""
    E, F = params.E, params.F
    return -(E + 0.5 * F * F) * (np.asarray(s) - t) - F * np.asarray(W_increment)


def mu_exact(s, t, W_increment, params):
    """Pathwise ratio ``mu(s)/mu(t)`` given ``W(s) - W(t)``."""
    return np.exp(log_mu_ratio(s, t, W_increment, params))


def mu_mean(s, t, params):
    """``E[mu(s)/mu(t)] = exp(-E (s - t))``."""
    return np.exp(-params.E * (np.asarray(s) - t))


def nu_exponent(s, t, W_increment, params):
    """``nu(s,t)`` with ``exp(nu) = sqrt(mu(s)/mu(t))``."""
    E, F = params.E, params.F
    return -(2 * E + F * F) / 4 * (np.asarray(s) - t) - F / 2 * np.asarray(W_increment)


def check_exponent_condition(p2, params):
    """Whether ``p2 > 1 + F^2/(2E)``.

    Under this condition a weighted integral of data in ``L^{p1}(L^{p2})``
    with ``p2 >= p1`` is integrable.
    """
    if not params.E > 0:
        raise NonpositiveE(f"E must be positive, got {params.E}",
                           operation="check_exponent_condition")
    return bool(p2 > 1 + params.F ** 2 / (2 * params.E))


# -- Brownian paths -------------------------------------------------------------

@dataclass(frozen=True)
class BrownianGrid:
    """One Brownian path sampled on a uniform grid starting at ``t_grid[0]``."""

    t_grid: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        if self.t_grid.shape != self.W.shape:
            raise ValueError("t_grid and W must have equal length")
        if self.W[0] != 0.0:
            raise ValueError("W must start at 0")
        if np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t_grid must be strictly increasing")

    @property
    def increments(self):
        return np.diff(self.W)

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.t_grid, self.W]), delimiter=",",
                   header="t,W", comments="", fmt="%.17g")


def _stream_block(seed, block, n_draws):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal((STREAM_BLOCK, n_draws))


def standard_normals(seed, path_ids, n_draws, antithetic=False):
    """Standard normal draws, one row per requested path index.

    With ``antithetic`` the odd path ``2j+1`` is the negation of path ``2j``.
    """
    path_ids = np.asarray(path_ids, dtype=np.int64)
    if antithetic:
        base = path_ids // 2
        sign = np.where(path_ids % 2 == 1, -1.0, 1.0)
    else:
        base = path_ids
        sign = np.ones(len(path_ids))
    out = np.empty((len(path_ids), n_draws))
    blocks = base // STREAM_BLOCK
    for blk in np.unique(blocks):
        rows = np.nonzero(blocks == blk)[0]
        draws = _stream_block(seed, blk, n_draws)
        out[rows] = draws[base[rows] % STREAM_BLOCK]
    out *= sign[:, None]
    return out


def brownian_increments(seed, path_ids, n_steps, dt, substeps=1, antithetic=False):
    """Brownian increments on a grid of ``n_steps`` steps of size ``dt``.

    Draws are made on the finer grid ``dt / substeps`` and summed, so a run at
    ``(dt, substeps=2)`` sees exactly the Brownian path of a run at
    ``(dt / 2, substeps=1)``.
    """
    z = standard_normals(seed, path_ids, n_steps * substeps, antithetic)
    dW = np.sqrt(dt / substeps) * z
    if substeps > 1:
        dW = dW.reshape(len(z), n_steps, substeps).sum(axis=2)
    return dW


def brownian_grid(seed, path_index, t0, n_steps, dt, substeps=1):
    dW = brownian_increments(seed, [path_index], n_steps, dt, substeps)[0]
    W = np.concatenate([[0.0], np.cumsum(dW)])
    return BrownianGrid(t0 + dt * np.arange(n_steps + 1), W)
