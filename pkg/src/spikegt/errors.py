"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not match the operation's contract."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf where finite values are required."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested on a batch too small to have any."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(ValueError):
    """Malformed or inconsistent dataset on disk."""


class MemoryCapExceeded(MemoryError):
    """Live tensor bytes exceeded the configured accounting cap."""
