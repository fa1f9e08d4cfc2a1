"""Decoder-side enhancement of compressed images with learned codebook priors."""

from .config import RunConfig, make_config
from .errors import (CodeIndexError, CodePriorError, ConfigError, DataError, DependencyError,
                     DimensionError, DomainError, FormatError, StageError, StateError)

__version__ = "0.1.0"

__all__ = [
    "CodeIndexError", "CodePriorError", "ConfigError", "DataError", "DependencyError",
    "DimensionError", "DomainError", "FormatError", "RunConfig", "StageError", "StateError",
    "make_config",
]
