"""Exception types raised across the pipeline."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """A persisted artifact does not match its binary layout."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or parameter."""


class DataWarning(UserWarning):
    """Recoverable data-quality issue (duplicates, saturated users)."""
