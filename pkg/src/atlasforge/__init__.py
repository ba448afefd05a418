"""Minimal neural atlas fitting, extraction and evaluation on raw point clouds."""

from atlasforge.errors import (
    AtlasError,
    DegenerateField,
    DegenerateInput,
    EmptyDomain,
    InvalidInput,
    NumericalError,
    StateError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "AtlasError",
    "DegenerateField",
    "DegenerateInput",
    "EmptyDomain",
    "InvalidInput",
    "NumericalError",
    "StateError",
    "UsageError",
]
