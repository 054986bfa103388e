"""Exception types shared across the package."""


class ConvlmmError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(ConvlmmError, ValueError):
    """A parameter or argument lies outside its mathematical domain."""


class DataError(ConvlmmError, ValueError):
    """Input data is malformed or inconsistent with the model specification."""


class UnsupportedStructureError(DomainError):
    """The requested model/covariance-structure combination has no fitter path."""


class NumericError(ConvlmmError, ArithmeticError):
    """A numerical routine failed (non-SPD matrix, quadrature breakdown, ...)."""


class ConvergenceError(ConvlmmError, RuntimeError):
    """An iterative procedure exhausted its budget without converging."""
