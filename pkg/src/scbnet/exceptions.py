"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class SCBNetError(Exception):
    """Base class for all package errors."""


class ShapeError(SCBNetError, ValueError):
    """Tensor or grid dimensions are inconsistent."""


class DataError(SCBNetError, ValueError):
    """Input data is malformed, empty or out of bounds."""


class NumericError(SCBNetError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

