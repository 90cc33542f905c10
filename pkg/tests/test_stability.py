import numpy as np
import pytest
from hypothesis import given, strategies as st

from reclq.errors import DivergenceDetected, NotFound, ProblemTooLarge, SingularOperator
from reclq.model import ProblemSpec
from reclq.stability import (LyapunovProblem, decay_rate, find_stabilizer, is_stabilizer,
                             is_weighted_stable, lyapunov_mc_oracle, lyapunov_residual,
                             solve_lyapunov, sufficient_condition, tilde_coefficients)


def scalar_P(a, c, E, F, lam=1.0):
    return lam / (E + 2 * F * c - 2 * a - c * c)


@pytest.mark.parametrize("a,c,E,F", [(0, 0, 1, 0), (-1, 0.5, 0.5, 1.0), (0.3, 0.2, 2.0, -0.5),
                                     (1.0, 0.0, 3.0, 0.0)])
def test_scalar_closed_form(a, c, E, F):
    P = solve_lyapunov(LyapunovProblem([[a]], [[c]], E, F, [[1.0]]))
    assert P[0, 0] == pytest.approx(scalar_P(a, c, E, F), rel=1e-12)


def test_example_values():
    assert solve_lyapunov(LyapunovProblem([[0.0]], [[0.0]], 1.0, 0.0, [[1.0]]))[0, 0] == \
        pytest.approx(1.0)
    assert solve_lyapunov(LyapunovProblem([[-1.0]], [[0.0]], 0.0, 0.0, [[2.0]]))[0, 0] == \
        pytest.approx(1.0)


def test_singular_operator():
    with pytest.raises(SingularOperator):
        solve_lyapunov(LyapunovProblem([[0.5]], [[0.0]], 1.0, 0.0, [[1.0]]))


def test_unstable_verdict():
    v = is_weighted_stable([[1.0]], [[0.0]], 1.0, 0.0)
    assert not v.stable
    assert v.min_eig_P < 0
    assert is_weighted_stable([[0.0]], [[0.0]], 1.0, 0.0).stable


def test_problem_too_large():
    n = 65
    with pytest.raises(ProblemTooLarge):
        solve_lyapunov(LyapunovProblem(-np.eye(n), np.zeros((n, n)), 1.0, 0.0, np.eye(n)))


@given(seed=st.integers(0, 10_000), E=st.floats(0.1, 3.0), F=st.floats(-2.0, 2.0))
def test_weighted_equals_classical_on_tilde(seed, E, F):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3)) - 2 * np.eye(3)
    C = 0.3 * rng.normal(size=(3, 3))
    L = rng.normal(size=(3, 3))
    Lam = L @ L.T + np.eye(3)
    try:
        P = solve_lyapunov(LyapunovProblem(A, C, E, F, Lam))
    except SingularOperator:
        return
    At, Ct = tilde_coefficients(A, C, E, F)
    Pc = solve_lyapunov(LyapunovProblem(At, Ct, 0.0, 0.0, Lam), form="classical")
    assert np.allclose(P, Pc, rtol=1e-9, atol=1e-12 * np.abs(P).max())
    res = lyapunov_residual(P, A, C, E, F, Lam)
    assert np.linalg.norm(res) <= 1e-10 * (1 + np.linalg.norm(P))


@given(seed=st.integers(0, 10_000), a1=st.floats(0.1, 3), a2=st.floats(0.1, 3))
def test_linear_in_lambda(seed, a1, a2):
    rng = np.random.default_rng(seed)
    A = -np.eye(2) + 0.3 * rng.normal(size=(2, 2))
    C = 0.2 * rng.normal(size=(2, 2))
    L1, L2 = (np.eye(2) + 0.1 * x @ x.T for x in rng.normal(size=(2, 2, 2)))
    solve = lambda L: solve_lyapunov(LyapunovProblem(A, C, 0.5, 0.3, L))
    assert np.allclose(solve(a1 * L1 + a2 * L2), a1 * solve(L1) + a2 * solve(L2),
                       rtol=1e-9, atol=1e-12)


@given(seed=st.integers(0, 10_000))
def test_monotone_in_lambda(seed):
    rng = np.random.default_rng(seed)
    A = -np.eye(2) + 0.3 * rng.normal(size=(2, 2))
    C = 0.2 * rng.normal(size=(2, 2))
    x = rng.normal(size=(2, 2))
    L1 = np.eye(2)
    L2 = L1 + x @ x.T
    P1 = solve_lyapunov(LyapunovProblem(A, C, 0.5, 0.3, L1))
    P2 = solve_lyapunov(LyapunovProblem(A, C, 0.5, 0.3, L2))
    assert np.linalg.eigvalsh(P2 - P1)[0] >= -1e-10


def test_sufficient_condition_is_only_sufficient():
    # large off-diagonal coupling makes A + A^T indefinite while A stays Hurwitz
    A = np.array([[-1.0, 5.0], [0.0, -1.0]])
    C = np.zeros((2, 2))
    assert is_weighted_stable(A, C, 0.0, 0.0).stable
    assert not sufficient_condition(A, C, 0.0, 0.0)


def test_stabilizer_examples(scalar):
    assert is_stabilizer([[-1.0]], scalar).stable
    assert is_stabilizer([[0.0]], scalar).stable
    spec = ProblemSpec.scalar(A=1.0, E=1.0)
    assert not is_stabilizer([[0.0]], spec).stable
    assert is_stabilizer([[-1.0]], spec).stable


def test_find_stabilizer():
    spec = ProblemSpec.scalar(A=1.0, E=1.0)
    Theta = find_stabilizer(spec)
    assert is_stabilizer(Theta, spec).stable
    with pytest.raises(NotFound):
        find_stabilizer(ProblemSpec.scalar(A=1.0, B=0.0, E=1.0), max_iters=5)


def test_decay_rate_scalar():
    assert decay_rate([[-1.0]], [[0.0]], 0.5, 0.0) == pytest.approx(2.5)


def test_mc_oracle_agrees_within_se():
    A = np.array([[-0.5, 0.3], [0.0, -0.4]])
    C = np.array([[0.3, 0.0], [0.1, 0.2]])
    prob = LyapunovProblem(A, C, 0.5, 0.4, np.eye(2))
    P = solve_lyapunov(prob)
    est = lyapunov_mc_oracle(prob, n_paths=2000, dt=2e-3, seed=1)
    assert np.all(np.abs(est.P - P) <= 4 * est.se + 0.02 * np.abs(P).max())


def test_mc_oracle_divergence():
    prob = LyapunovProblem([[0.6]], [[0.0]], 1.0, 0.0, [[1.0]], require_pd=False)
    with pytest.raises(DivergenceDetected):
        lyapunov_mc_oracle(prob, n_paths=4, T_max=None)
    prob = LyapunovProblem([[20.0]], [[0.0]], 1.0, 0.0, [[1.0]], require_pd=False)
    with pytest.raises(DivergenceDetected):
        lyapunov_mc_oracle(prob, n_paths=4, T_max=5.0, dt=1e-2)
