"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3. Plain ValueError/TypeError from misuse of library
functions are programming errors and are not remapped.
"""


class PafuseError(Exception):
    """Base class for errors raised by this package."""


class UsageError(PafuseError):
    """Invalid flags or configuration values."""


class DataError(PafuseError):
    """Invalid dataset, layout, or checkpoint contents."""


class NumericError(PafuseError):
    """Non-finite values where finite ones are required (e.g. diverged loss)."""
