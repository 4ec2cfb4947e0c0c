"""Exception types shared across the package."""


class VolformerError(Exception):
    """Base class for all package errors."""


class DimensionError(VolformerError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(VolformerError):
    """Non-finite values where finite ones are required."""


class ConfigError(VolformerError):
    """Invalid configuration value or combination."""


class UsageError(VolformerError):
    """An API was called in a way its contract forbids."""


class DataError(VolformerError):
    """Dataset-level problem: bad labels, empty splits, classes too small."""


class FormatError(VolformerError):
    """Malformed binary or JSON container; messages carry byte offsets."""


class CheckpointMismatchError(VolformerError):
    """Checkpoint contents disagree with the expected model configuration."""
