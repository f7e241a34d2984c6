"""Exception types shared across the library.

The CLI maps these to process exit codes: usage errors exit 1,
``DataValidationError`` exits 2, ``NumericalError`` exits 3.
"""


class PlacenetError(Exception):
    """Base class for all library errors."""


class DataValidationError(PlacenetError):
    """Malformed or inconsistent input data (files, vocabularies, matrices)."""


class NumericalError(PlacenetError):
    """Numerical failure during training or inference (NaN/Inf loss)."""
