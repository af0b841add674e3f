"""Exception hierarchy shared across the package."""


class MarsError(Exception):
    """Base class for all package errors."""


class ShapeError(MarsError, ValueError):
    """Tensor shapes disagree with a block or model contract."""


class NumericError(MarsError, ArithmeticError):
    """Non-finite values where finite values are required."""


class ConfigError(MarsError, ValueError):
    """Invalid configuration (flags, thresholds, unknown domain ids)."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [message])


class DataError(MarsError, ValueError):
    """Malformed dataset content: annotations, labels, degenerate boxes."""


class CheckpointError(MarsError):
    """Checkpoint cannot be loaded (digest mismatch, missing tensors)."""


class TrainingError(MarsError, RuntimeError):
    """Optimization aborted, e.g. on a non-finite loss."""
