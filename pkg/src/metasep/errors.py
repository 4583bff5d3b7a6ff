"""Exception types shared across the package."""


class MetasepError(Exception):
    """Base class for package errors."""


class AudioIOError(MetasepError):
    """Raised when a WAV file cannot be read or written."""


class ConfigError(MetasepError):
    """Raised for invalid configuration values or unknown config keys."""


class ShapeError(MetasepError):
    """Raised when a tensor does not match its declared shape."""


class DataError(MetasepError):
    """Raised when a dataset folder or synthesis spec is unusable."""


class CheckpointError(MetasepError):
    """Raised for unreadable or version-incompatible checkpoints."""


class TrainingError(MetasepError):
    """Raised when training aborts, e.g. on non-finite values."""
