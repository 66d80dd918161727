"""Exception types raised by the engine."""


class WasteCNNError(Exception):
    """Base class for all engine errors."""


class ShapeError(WasteCNNError, ValueError):
    """Tensor shapes or layer geometry do not conform."""


class ValidationError(WasteCNNError, ValueError):
    """An input value violates a documented precondition (e.g. non one-hot target)."""


class ConfigError(WasteCNNError, ValueError):
    """A model, training or run configuration is invalid."""


class DivergenceError(WasteCNNError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class DatasetError(WasteCNNError):
    """The dataset directory layout is malformed or empty."""


class DecodeError(WasteCNNError):
    """An image file could not be decoded."""

    def __init__(self, path, reason):
        self.path = path
        super().__init__(f"cannot decode image {path}: {reason}")


class CheckpointError(WasteCNNError):
    """Checkpoint magic, version or layout does not match this engine."""


class CheckpointTruncatedError(CheckpointError, OSError):
    """Checkpoint file ended before all declared content was read."""
