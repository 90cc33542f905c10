import numpy as np
import pytest
from hypothesis import settings

from reclq.model import ProblemSpec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def scalar():
    """A=0, B=1, C=D=0, E=2, F=0, Q=R=1, x0=1 (optimal value sqrt(2) - 1)."""
    return ProblemSpec.scalar()


def random_spec(rng, n, m, E=1.0, F=0.5, noise=0.3):
    """Random instance satisfying the strict positivity hypotheses."""
    A = rng.normal(size=(n, n)) * 0.7
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(n, n)) * noise
    D = rng.normal(size=(n, m)) * noise
    L = rng.normal(size=(n, n))
    R = np.eye(m) + 0.2 * np.diag(rng.random(m))
    S = 0.2 * rng.normal(size=(m, n))
    Q = L @ L.T / n + np.eye(n) + S.T @ np.linalg.solve(R, S)
    return ProblemSpec(A=A, B=B, C=C, D=D, E=E, F=F, Q=Q, S=S, R=R, x0=rng.normal(size=n))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
