"""Exception types shared across the package."""


class CamilError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CamilError, ValueError):
    """Malformed on-disk input (feature files, CSVs, checkpoints, configs)."""


class DegenerateError(CamilError, ValueError):
    """Input is valid in shape but carries no usable variation."""


class NumericError(CamilError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class SplitError(CamilError, ValueError):
    """A cohort cannot be split under the requested constraints."""
