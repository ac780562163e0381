"""Exception hierarchy."""


class CemError(Exception):
    """Base class for all package errors."""


class GeometryError(CemError):
    pass


class DimensionError(CemError, ValueError):
    pass


class ValidationError(CemError, ValueError):
    pass


class NumericalError(CemError, ArithmeticError):
    """Raised when a linear solve or factorization fails.

    ``residual`` carries the achieved relative residual when available.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class UndefinedMetricError(CemError, ValueError):
    pass


class ConfigError(CemError, ValueError):
    """Invalid method name, hyperparameter or run configuration."""
