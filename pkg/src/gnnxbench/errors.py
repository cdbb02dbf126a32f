"""Exception types shared across the package."""


class BenchError(Exception):
    """Base class for all errors raised by gnnxbench."""


class BundleError(BenchError):
    """A graph bundle directory is missing files or unreadable."""


class ValidationError(BenchError):
    """Input data violates a structural invariant (bad index, ragged row, ...)."""


class ParameterError(BenchError):
    """An argument is outside its documented domain."""


class ShapeError(BenchError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(BenchError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class TrainingError(BenchError):
    """Training diverged; carries the epoch at which the loss became non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(BenchError):
    """An experiment or defense configuration is invalid."""


class MetricError(BenchError):
    """A metric is undefined for the given inputs (empty list, mismatched supports)."""
