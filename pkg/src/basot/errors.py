"""Exception types shared across the package.

The CLI maps ``BasotError`` (bad inputs, bad data) to exit code 2 and any
other exception (internal invariant violation) to exit code 3.
"""


class BasotError(Exception):
    """Base class for user/data errors."""


class InvalidArgumentError(BasotError, ValueError):
    """An argument violates a documented precondition."""


class UndefinedRateError(InvalidArgumentError):
    """An error rate was requested against an empty reference."""


class InfeasibleAlignmentError(BasotError):
    """A CTC target cannot be aligned to the given number of frames."""
