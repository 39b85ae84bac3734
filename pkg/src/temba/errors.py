"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ValidationError and ContractViolation
exit 1, NumericFault exits 2, FormatError (and other I/O trouble) exits 3.
"""


class TembaError(Exception):
    """Base class for all package errors."""


class ContractViolation(TembaError):
    """An operation was called with arguments that violate its contract."""


class ValidationError(TembaError):
    """User-supplied configuration or annotation data failed validation."""


class NumericFault(TembaError):
    """A numeric error state: non-finite values, diverged training."""


class FormatError(TembaError):
    """A binary or JSON artifact on disk does not match its format."""
