"""Exception hierarchy shared by the library and the command line front end."""


class MetricEnsembleError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MetricEnsembleError, ValueError):
    """Rejected input: wrong shapes, out-of-range parameters, bad values."""


class DataError(MetricEnsembleError):
    """Malformed or inconsistent descriptor data on disk or in memory."""


class NumericalError(MetricEnsembleError, ArithmeticError):
    """A matrix was singular, indefinite or otherwise numerically unusable."""


class ConvergenceError(MetricEnsembleError):
    """An iterative solver stopped before reaching its tolerance.

    ``info`` carries solver-specific diagnostics (residuals, violation trace).
    """

    def __init__(self, message, info=None):
        super().__init__(message)
        self.info = {} if info is None else dict(info)


class ConfigError(MetricEnsembleError):
    """Invalid or inconsistent run configuration."""
