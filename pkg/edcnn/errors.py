class ShapeMismatchError(ValueError):
    """Raised when tensor shapes disagree; the message names the dimension."""

    pass


class NonFiniteError(ArithmeticError):
    """Raised when a loss or gradient contains NaN or Inf."""

    pass


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is reused or belongs to another model."""

    pass


class ConfigError(ValueError):
    """Raised when a configuration file or value is invalid."""

    pass


class DatasetError(Exception):
    """Raised when a paired dataset is missing, unpaired or empty."""

    pass


class ImageFormatError(Exception):
    """Raised when an image file is malformed or unsupported."""

    pass


class TrainingError(RuntimeError):
    """Raised when training cannot continue (non-finite loss)."""

    pass


class CheckpointError(Exception):
    """Base class for checkpoint container errors."""

    pass


class BadMagicError(CheckpointError):
    """Raised when a checkpoint does not start with the expected magic bytes."""

    pass


class VersionMismatchError(CheckpointError):
    """Raised when a checkpoint was written by an unsupported format version."""

    pass


class CheckpointShapeError(CheckpointError):
    """Raised when a stored tensor does not match the expected shape."""

    pass


class TruncatedCheckpointError(CheckpointError):
    """Raised when a checkpoint ends before all records are read."""

    pass
