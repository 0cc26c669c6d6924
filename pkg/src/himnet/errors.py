class HimNetError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(HimNetError, ValueError):
    """Invalid configuration or arguments."""


class DataError(HimNetError, ValueError):
    """Malformed, inconsistent or insufficient data."""


class ShapeError(HimNetError, ValueError):
    """Tensor shapes do not agree."""


class TrainingError(HimNetError, RuntimeError):
    """Training diverged or could not proceed."""


class CheckpointError(HimNetError, ValueError):
    """Checkpoint file is malformed or incompatible."""
