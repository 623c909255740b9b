"""Exception hierarchy shared across the package."""


class ForecastError(Exception):
    """Base class for all package errors."""


class ArgumentError(ForecastError, ValueError):
    """Invalid argument value."""


class ConfigurationError(ForecastError, ValueError):
    """A configuration cannot be satisfied by the data at hand."""


class ParseError(ForecastError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class IntegrityError(ForecastError, ValueError):
    """Timestamps are not strictly increasing on an hourly grid."""


class DataError(ForecastError, ValueError):
    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class StateError(ForecastError, RuntimeError):
    """Operation called on an object in the wrong state."""


class ShapeError(ForecastError, ValueError):
    """Tensor shapes are inconsistent."""


class StructuralError(ForecastError, ValueError):
    """Graph structure makes an operation undefined."""


class LeakageError(ForecastError, RuntimeError):
    """A fit touched rows outside the training split."""


class ContractError(ForecastError, RuntimeError):
    """A caller violated an interface contract."""


class TrainingError(ForecastError, RuntimeError):
    def __init__(self, message, run_log=None):
        super().__init__(message)
        self.run_log = run_log


class MissingArtifactError(ForecastError, FileNotFoundError):
    """A file an operation depends on has not been produced yet."""
