"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is missing, out of range, or inconsistent."""


class TapeStateError(RuntimeError):
    """A tape was used after it was consumed, or a tensor is not on it."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""
