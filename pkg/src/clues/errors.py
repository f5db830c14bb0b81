"""Exception hierarchy shared across the package."""


class CluesError(Exception):
    """Base class for all package errors."""


class ConfigError(CluesError, ValueError):
    pass


class DimensionError(CluesError, ValueError):
    pass


class NumericError(CluesError, ArithmeticError):
    pass


class StepIndexError(CluesError, ValueError):
    pass


class StateError(CluesError, RuntimeError):
    """Optimizer state missing or inconsistent."""


class IncompatibleAdaptersError(CluesError, ValueError):
    pass


class DataError(CluesError, ValueError):
    pass


class UndefinedMetricError(CluesError, ValueError):
    pass


class LabelAccessError(CluesError, RuntimeError):
    """A ground-truth quality label was read inside a sealed region."""


class StageError(CluesError, RuntimeError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
