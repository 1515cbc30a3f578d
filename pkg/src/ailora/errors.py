"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class StoreFormatError(ValueError):
    """A tensor container file violates the TSR1 format."""


class ConfigError(ValueError):
    """A user-supplied configuration value is invalid."""


class NumericError(RuntimeError):
    """A numerical routine received or produced an invalid result."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss."""
