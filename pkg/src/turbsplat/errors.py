"""Exception types shared across the package.

The CLI maps these onto stable exit codes: UsageError -> 1,
FileFormatError / OSError -> 2, NumericalError -> 3.
"""


class TurbsplatError(Exception):
    """Base class for all package errors."""


class UsageError(TurbsplatError):
    """Invalid arguments, configuration, or preconditions."""


class FileFormatError(TurbsplatError):
    """Unreadable, unwritable, or malformed files."""


class NumericalError(TurbsplatError):
    """Degenerate numerics: singular covariances, NaN losses, zero-variance PCA."""
