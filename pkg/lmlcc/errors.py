"""Exception hierarchy.

Every error carries the exit code the command line returns for its category:
1 usage / configuration, 2 data, 3 numerical failure.

"""
from typing import Optional


class LmlccError(Exception):
    """Base class for all pipeline errors."""
    exit_code = 1


class UsageError(LmlccError):
    """Invalid flag combination or command usage."""
    exit_code = 1


class ConfigError(UsageError, ValueError):
    """Unknown configuration key or invalid configuration value."""


class DataError(LmlccError, ValueError):
    """Problem with an input file or the data it contains."""
    exit_code = 2


class ParseError(DataError):
    """A header or CSV could not be parsed.

    Args:
        key: Name of the missing or malformed key.
        message: Optional detail.

    """
    def __init__(self, key: str, message: Optional[str] = None):
        self.key = key
        super().__init__(message or f'missing or malformed key: {key}')


class SizeMismatchError(DataError):
    """Raw data length does not match the header geometry."""


class ValidationError(DataError):
    """A value violates its domain rule.

    Args:
        message: Description of the violation.
        row: 1-based data row number when raised while reading a CSV.

    """
    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row

        if row is not None:
            message = f'row {row}: {message}'

        super().__init__(message)


class DuplicateError(DataError):
    """An identifier that must be unique appears twice."""


class InsufficientDataError(DataError):
    """Not enough samples to perform the requested operation."""


class OutOfBoundsError(DataError):
    """A requested region lies entirely outside a volume."""


class ShapeError(DataError):
    """Tensor or array shapes are incompatible."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt or does not match its config."""


class NumericalError(LmlccError):
    """Training produced a non-finite value."""
    exit_code = 3
