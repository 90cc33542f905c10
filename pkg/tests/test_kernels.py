import os
import subprocess
import sys

import numpy as np
import pytest

from reclq import kernels
from reclq.weight import brownian_increments

needs_compiled = pytest.mark.skipif(kernels._compiled is None,
                                    reason="compiled extension not built")


def _data(P=16, K=200, n=3, seed=0):
    rng = np.random.default_rng(seed)
    A = -np.eye(n) + 0.3 * rng.normal(size=(n, n))
    C = 0.3 * rng.normal(size=(n, n))
    drift = rng.normal(size=(K, n)) * 0.1
    diff = rng.normal(size=(P, K, n)) * 0.1
    dW = brownian_increments(seed, np.arange(P), K, 0.01)
    return rng.normal(size=n), A, C, drift, diff, dW


@needs_compiled
@pytest.mark.parametrize("milstein", [False, True])
def test_euler_backends_agree(milstein):
    x0, A, C, drift, diff, dW = _data()
    Xc, sc = kernels.euler_affine(x0, A, C, drift, diff, dW, 0.01, milstein, backend="cython")
    Xp, sp = kernels.euler_affine(x0, A, C, drift, diff, dW, 0.01, milstein, backend="numpy")
    assert sc == sp == -1
    assert np.allclose(Xc, Xp, rtol=1e-12, atol=1e-13)


@needs_compiled
@pytest.mark.parametrize("F", [0.0, 0.7])
def test_lyapunov_accumulate_backends_agree(F):
    _, A, C, _, _, dW = _data(K=500)
    Lam = np.eye(3)
    a, sa = kernels.lyapunov_accumulate(A, C, Lam, dW, 0.01, 1.0 + F * F / 2, F, backend="cython")
    b, sb = kernels.lyapunov_accumulate(A, C, Lam, dW, 0.01, 1.0 + F * F / 2, F, backend="numpy")
    assert sa == sb == -1
    assert np.allclose(a, b, rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("cython", marks=needs_compiled)])
def test_blowup_reported(backend):
    dW = np.zeros((2, 400))
    X, step = kernels.euler_affine([1.0], [[100.0]], [[0.0]], np.zeros((400, 1)),
                                   np.zeros((400, 1)), dW, 0.01, backend=backend)
    assert step >= 0


def test_euler_deterministic_exact_step():
    dW = np.zeros((1, 3))
    X, _ = kernels.euler_affine([1.0], [[-1.0]], [[0.0]], np.ones((3, 1)), np.zeros((3, 1)),
                                dW, 0.5, backend="numpy")
    assert np.allclose(X[0, :, 0], [1.0, 1.0, 1.0, 1.0])


def test_pure_env_selects_numpy():
    env = dict(os.environ, RLQ_PURE="1")
    out = subprocess.run([sys.executable, "-c", "import reclq; print(reclq.BACKEND)"],
                         env=env, check=True, capture_output=True, text=True).stdout
    assert out.strip() == "numpy"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels._module("fortran")
