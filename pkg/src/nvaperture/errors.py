"""Exception hierarchy. The CLI maps each class onto an exit code."""


class WorkbenchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(WorkbenchError, ValueError):
    """Invalid configuration, geometry, or argument combination."""


class DomainError(WorkbenchError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StabilityError(WorkbenchError, RuntimeError):
    """FDTD field blow-up."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"field energy diverged at step {step}")


class CoverageError(WorkbenchError, ValueError):
    """A field profile does not cover the region an analysis needs."""


class InsufficientDataError(WorkbenchError, ValueError):
    """Not enough events or points for the requested statistic."""


class ModelEvaluationError(WorkbenchError, FloatingPointError):
    """A fit model produced non-finite residuals."""

    def __init__(self, params, message=None):
        self.params = params
        super().__init__(message or f"non-finite residuals at parameters {list(params)!r}")
