"""Adaptive confidence regularization for multimodal failure detection."""

from acr.errors import (
    DegenerateSplit,
    DivergedTraining,
    InvalidConfig,
    InvalidInput,
    ShapeMismatch,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateSplit",
    "DivergedTraining",
    "InvalidConfig",
    "InvalidInput",
    "ShapeMismatch",
]
