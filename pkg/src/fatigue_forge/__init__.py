"""PERCLOS regression from physiological signals with boosted trees and
exact Shapley explanations."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlignmentError,
    CapacityError,
    ModelIntegrityError,
    ParseError,
    ValidationError,
)

__all__ = [
    "AlignmentError",
    "CapacityError",
    "ModelIntegrityError",
    "ParseError",
    "ValidationError",
    "__version__",
]
