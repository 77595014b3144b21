"""POD reduced-order models and neural-network surrogates for nonlinear diffusion."""

from .errors import (ConditioningError, DatasetError, MeshError, NumericalRangeError,
                     PlacementError, PodnetError, RankError, SolverError, StageError,
                     TrainingDivergedError)

__version__ = "0.1.0"

__all__ = ["ConditioningError", "DatasetError", "MeshError", "NumericalRangeError",
           "PlacementError", "PodnetError", "RankError", "SolverError", "StageError",
           "TrainingDivergedError"]
