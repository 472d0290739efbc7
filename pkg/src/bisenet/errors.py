"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid shapes, hyperparameters or configuration values."""


class StateError(RuntimeError):
    """An object was used before it reached the required state."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointMismatch(RuntimeError):
    """A checkpoint does not match the architecture it is loaded into."""
