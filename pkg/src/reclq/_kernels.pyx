# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled time-stepping kernel for affine linear SDEs driven by one Brownian motion."""

from libc.math cimport exp, fabs, isfinite

import numpy as np

DEF BLOWUP_SQ = 1e24


def euler_affine(const double[:, :] x0, const double[:, ::1] Acl, const double[:, ::1] Ccl,
                 const double[:, :, :] drift, const double[:, :, :] diff,
                 const double[:, ::1] dW, double dt, bint milstein=False):
    """Step ``dX = (Acl X + drift) ds + (Ccl X + diff) dW`` for every path.

    Returns ``(X, step)`` with ``X`` of shape (paths, steps + 1, n) and ``step``
    the first step index at which some path left the ball of radius 1e12
    (or -1).  Stepping of a path stops at its blow-up step.
    """
    cdef Py_ssize_t P = dW.shape[0]
    cdef Py_ssize_t K = dW.shape[1]
    cdef Py_ssize_t n = Acl.shape[0]
    X_arr = np.zeros((P, K + 1, n))
    g_arr = np.empty(n)
    cdef double[:, :, ::1] X = X_arr
    cdef double[::1] g = g_arr
    cdef Py_ssize_t p, k, i, j
    cdef double a, c, w, w2, nrm, cg
    cdef Py_ssize_t first = -1
    cdef bint bad
    with nogil:
        for p in range(P):
            for i in range(n):
                X[p, 0, i] = x0[p, i]
            for k in range(K):
                w = dW[p, k]
                w2 = 0.5 * (w * w - dt)
                for i in range(n):
                    c = diff[p, k, i]
                    for j in range(n):
                        c = c + Ccl[i, j] * X[p, k, j]
                    g[i] = c
                nrm = 0.0
                for i in range(n):
                    a = drift[p, k, i]
                    for j in range(n):
                        a = a + Acl[i, j] * X[p, k, j]
                    X[p, k + 1, i] = X[p, k, i] + a * dt + g[i] * w
                    if milstein:
                        cg = 0.0
                        for j in range(n):
                            cg = cg + Ccl[i, j] * g[j]
                        X[p, k + 1, i] = X[p, k + 1, i] + cg * w2
                    nrm = nrm + X[p, k + 1, i] * X[p, k + 1, i]
                bad = not isfinite(nrm) or nrm > BLOWUP_SQ
                if bad:
                    if first < 0 or k + 1 < first:
                        first = k + 1
                    break
    return X_arr, first


def lyapunov_accumulate(const double[:, ::1] A, const double[:, ::1] C,
                        const double[:, ::1] Lam, const double[:, ::1] dW, double dt,
                        double rate, double F, double level):
    """Per-path trapezoid of ``mu(s) Psi(s)^T Lam Psi(s)`` over the grid.

    ``Psi`` follows Euler-Maruyama for ``dPsi = A Psi ds + C Psi dW`` from
    ``Psi(0) = I``; ``log mu`` decreases by ``rate dt + F dW`` per step.
    Returns ``(out, step)`` with ``out`` of shape (paths, n, n) and ``step``
    the first step where an integrand entry exceeded ``level`` (or -1).
    """
    cdef Py_ssize_t P = dW.shape[0]
    cdef Py_ssize_t K = dW.shape[1]
    cdef Py_ssize_t n = A.shape[0]
    out_arr = np.zeros((P, n, n))
    psi_arr = np.empty((n, n))
    nxt_arr = np.empty((n, n))
    lp_arr = np.empty((n, n))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] psi = psi_arr
    cdef double[:, ::1] nxt = nxt_arr
    cdef double[:, ::1] lp = lp_arr
    cdef Py_ssize_t p, k, i, j, l
    cdef double logmu, mu, w, wgt, a, c, v
    cdef double decay = exp(-rate * dt)
    cdef Py_ssize_t first = -1
    with nogil:
        for p in range(P):
            for i in range(n):
                for j in range(n):
                    psi[i, j] = 1.0 if i == j else 0.0
            logmu = 0.0
            mu = 1.0
            for k in range(K + 1):
                if F != 0.0:
                    mu = exp(logmu)
                wgt = 0.5 * dt if (k == 0 or k == K) else dt
                # lp = Lam Psi
                for i in range(n):
                    for j in range(n):
                        a = 0.0
                        for l in range(n):
                            a = a + Lam[i, l] * psi[l, j]
                        lp[i, j] = a
                for i in range(n):
                    for j in range(n):
                        a = 0.0
                        for l in range(n):
                            a = a + psi[l, i] * lp[l, j]
                        v = mu * a
                        if not isfinite(v) or fabs(v) > level:
                            if first < 0 or k < first:
                                first = k
                        out[p, i, j] = out[p, i, j] + wgt * v
                if first >= 0 and first <= k:
                    break
                if k == K:
                    break
                w = dW[p, k]
                for i in range(n):
                    for j in range(n):
                        a = 0.0
                        c = 0.0
                        for l in range(n):
                            a = a + A[i, l] * psi[l, j]
                            c = c + C[i, l] * psi[l, j]
                        nxt[i, j] = psi[i, j] + a * dt + c * w
                for i in range(n):
                    for j in range(n):
                        psi[i, j] = nxt[i, j]
                logmu = logmu - rate * dt - F * w
                if F == 0.0:
                    mu = mu * decay
    return out_arr, first
