"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class UsageError(Exception):
    """Caller violated a precondition (bad argument, bad config key)."""


class DimensionError(UsageError):
    """Tensor shapes are incompatible for the requested operation."""


class DataError(Exception):
    """On-disk data is missing or malformed."""


class NumericError(Exception):
    """Non-finite values appeared, or a numeric verification failed."""
