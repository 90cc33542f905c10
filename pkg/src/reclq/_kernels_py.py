"""Pure numpy version of the time-stepping kernel (vectorized over paths)."""
import numpy as np

BLOWUP_SQ = 1e24
_CHECK_EVERY = 32


def euler_affine(x0, Acl, Ccl, drift, diff, dW, dt, milstein=False):
    P, K = dW.shape
    n = Acl.shape[0]
    X = np.zeros((P, K + 1, n))
    X[:, 0] = x0
    At, Ct = Acl.T, Ccl.T
    for k in range(K):
        x = X[:, k]
        w = dW[:, k, None]
        g = x @ Ct + diff[:, k]
        nxt = x + (x @ At + drift[:, k]) * dt + g * w
        if milstein:
            nxt += (g @ Ct) * (0.5 * (w * w - dt))
        X[:, k + 1] = nxt
        if (k + 1) % _CHECK_EVERY == 0 or k + 1 == K:
            lo = max(0, k + 1 - _CHECK_EVERY)
            sq = np.einsum("pki,pki->pk", X[:, lo + 1:k + 2], X[:, lo + 1:k + 2])
            bad = ~np.isfinite(sq) | (sq > BLOWUP_SQ)
            if bad.any():
                return X, int(lo + 1 + np.nonzero(bad.any(axis=0))[0][0])
    return X, -1


def lyapunov_accumulate(A, C, Lam, dW, dt, rate, F, level):
    P, K = dW.shape
    n = A.shape[0]
    psi = np.broadcast_to(np.eye(n), (P, n, n)).copy()
    out = np.zeros((P, n, n))
    logmu = np.zeros(P)
    for k in range(K + 1):
        v = np.exp(logmu)[:, None, None] * np.einsum("pli,lm,pmj->pij", psi, Lam, psi)
        bad = ~np.isfinite(v) | (np.abs(v) > level)
        if bad.any():
            return out, k
        out += (0.5 * dt if k in (0, K) else dt) * v
        if k == K:
            break
        w = dW[:, k]
        psi = psi + (A @ psi) * dt + (C @ psi) * w[:, None, None]
        logmu -= rate * dt + F * w
    return out, -1
