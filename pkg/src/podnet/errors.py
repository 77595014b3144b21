"""Exception types raised across the package."""


class PodnetError(Exception):
    """Base class for all package errors."""


class MeshError(PodnetError, ValueError):
    pass


class NumericalRangeError(PodnetError, ArithmeticError):
    """A coefficient or state left the representable range."""


class SolverError(PodnetError, RuntimeError):
    """Linear solve failed to reach its tolerance.

    Attributes
    ----------
    residual : float
        Relative residual norm at termination.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class PlacementError(PodnetError, RuntimeError):
    """Channels could not be placed without overlap."""


class RankError(PodnetError, ValueError):
    """Requested more modes than the data supports, or a basis is singular."""


class ConditioningError(PodnetError, ValueError):
    pass


class TrainingDivergedError(PodnetError, FloatingPointError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class DatasetError(PodnetError, ValueError):
    pass


class StageError(PodnetError, RuntimeError):
    """An experiment stage failed; carries the stage name and seed."""

    def __init__(self, stage, seed, cause):
        super().__init__(f"stage '{stage}' failed (seed={seed}): {cause}")
        self.stage = stage
        self.seed = seed
        self.cause = cause
