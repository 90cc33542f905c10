"""Infinite-horizon stochastic LQ control with a recursive (exponentially weighted) cost."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
from .model import DeterministicSignal, ProblemSpec, validate  # noqa: E402
from .synthesis import solve_are, synthesize  # noqa: E402

__all__ = ["BACKEND", "DeterministicSignal", "ProblemSpec", "validate", "solve_are",
           "synthesize", "__version__"]
