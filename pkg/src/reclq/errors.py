"""Exception hierarchy.

Every error carries the module that raised it so the command line can report
``module.operation: message`` without guessing.
"""


class RLQError(Exception):
    """Base class for all library errors."""

    module = "reclq"

    def __init__(self, message="", operation=None, **details):
        super().__init__(message)
        self.operation = operation
        self.details = details

    def describe(self):
        where = self.module if self.operation is None else f"{self.module}.{self.operation}"
        return f"{where}: {type(self).__name__}: {self}"


# -- model -------------------------------------------------------------------

class ModelError(RLQError):
    module = "model"


class DimensionMismatch(ModelError):
    pass


class NotSymmetric(ModelError):
    pass


class NotPositiveDefinite(ModelError):
    def __init__(self, message="", operation=None, matrix=None, min_eig=None, **details):
        super().__init__(message, operation, **details)
        self.matrix = matrix
        self.min_eig = min_eig


class NonIntegrableSignal(ModelError):
    pass


class UnsupportedSignalKind(ModelError):
    pass


class ProblemFileError(ModelError):
    pass


class NotStabilizable(ModelError):
    pass


# -- weight ------------------------------------------------------------------

class WeightError(RLQError):
    module = "weight"


class NonpositiveE(WeightError):
    pass


# -- stability ---------------------------------------------------------------

class StabilityError(RLQError):
    module = "stability"


class SingularOperator(StabilityError):
    pass


class DivergenceDetected(StabilityError):
    pass


class NotFound(StabilityError):
    pass


class ProblemTooLarge(StabilityError):
    pass


# -- transform ---------------------------------------------------------------

class TransformError(RLQError):
    module = "transform"


class GridMismatch(TransformError):
    pass


# -- synthesis ---------------------------------------------------------------

class SynthesisError(RLQError):
    module = "synthesis"


class NoInitialStabilizer(SynthesisError):
    pass


class IterationDiverged(SynthesisError):
    pass


class NotCertified(SynthesisError):
    pass


class NotHurwitz(SynthesisError):
    pass


class QuadratureFailure(SynthesisError):
    pass


class SingularRplus(SynthesisError):
    pass


class NotHomogeneous(SynthesisError):
    pass


# -- mc_engine ---------------------------------------------------------------

class EngineError(RLQError):
    module = "mc_engine"


class NumericalBlowup(EngineError):
    def __init__(self, message="", operation=None, step=None, **details):
        super().__init__(message, operation, **details)
        self.step = step


class NonIntegrableTail(EngineError):
    pass


class HorizonRequired(EngineError):
    pass


class OptimalityViolated(EngineError):
    pass
