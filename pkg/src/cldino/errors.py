"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class ShapeError(ValueError):
    """Array shapes do not agree."""


class TooShortError(ValueError):
    """Input signal or sequence is shorter than the operation requires."""


class ZeroPowerError(ValueError):
    """A signal with zero power cannot be mixed at a target SNR."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class CheckpointError(IOError):
    """Checkpoint file cannot be read."""


class IntegrityError(CheckpointError):
    """Checkpoint file is truncated or otherwise corrupted."""
