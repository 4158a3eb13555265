"""Coordinate networks with Gaussian, sine and positional-embedding variants, fitted jointly with poses."""

from .errors import (ConfigError, ContractViolation, DegenerateConfigurationError, FormatError,
                     NonFiniteError, OutOfBoundsError, PointAtInfinityError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DegenerateConfigurationError",
    "FormatError",
    "NonFiniteError",
    "OutOfBoundsError",
    "PointAtInfinityError",
    "__version__",
]
