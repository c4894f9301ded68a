"""Sub-period latent dynamics: count VAEs, coupled linear latent ODEs, two-stage weighted Lasso."""
__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .errors import (  # noqa: E402
    AlignmentError, ContractError, ConvergenceError, DependencyError, DomainError,
    InsufficientDataError, NonFiniteGradientError, NonFiniteLossError, NumericalError,
    ParseError, ShapeError, SpdynError, ValidationError)

__all__ = [
    "BACKEND", "__version__", "AlignmentError", "ContractError", "ConvergenceError",
    "DependencyError", "DomainError", "InsufficientDataError", "NonFiniteGradientError",
    "NonFiniteLossError", "NumericalError", "ParseError", "ShapeError", "SpdynError",
    "ValidationError",
]
