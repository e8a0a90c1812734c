"""Exception types shared across the package."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions (shapes, ranges)."""


class DataError(ValueError):
    """Raised for malformed or invariant-violating logged data."""


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""
