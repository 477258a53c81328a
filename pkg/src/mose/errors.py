"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class MoseError(Exception):
    """Base class for all package errors."""


class UsageError(MoseError):
    """Invalid arguments, configuration, or API preconditions."""


class DataError(MoseError):
    """Corrupt, missing, or inconsistent input data."""


class NumericError(MoseError):
    """Non-finite values or failed numerical checks."""
