"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class RingMiceError(Exception):
    exit_code = 1


class UsageError(RingMiceError, ValueError):
    """Caller violated an operation's contract (bad arguments, bad spec)."""

    exit_code = 2


class DataError(RingMiceError, ValueError):
    """Input data cannot be processed (parse failure, fully-missing column)."""

    exit_code = 3


class NumericError(RingMiceError, ArithmeticError):
    """Training failed numerically (divergence, singular system)."""

    exit_code = 4
