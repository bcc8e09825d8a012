"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation and usage problems exit 1,
format and I/O problems exit 2.
"""


class MixcalError(Exception):
    """Base class for all errors raised by mixcal."""


class ValidationError(MixcalError, ValueError):
    """An argument or input violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes do not line up."""


class NumericError(ValidationError):
    """A NaN or infinity reached an operation that requires finite input."""


class UsageError(MixcalError):
    """An API or CLI was driven incorrectly (bad node, bad layer, missing model)."""


class FormatError(MixcalError):
    """A file on disk is malformed."""
