"""Sequential story recommendation trained against a learned user simulator."""
from .errors import ConfigError, ContractError, DataError, NumericalError

__all__ = ["ConfigError", "ContractError", "DataError", "NumericalError"]
