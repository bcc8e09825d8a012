"""Desk-scale laboratory for studying how mixup training affects calibration."""

from mixcal.errors import (
    DimensionError,
    FormatError,
    MixcalError,
    NumericError,
    UsageError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "FormatError",
    "MixcalError",
    "NumericError",
    "UsageError",
    "ValidationError",
    "__version__",
]
