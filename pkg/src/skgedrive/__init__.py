"""Desk-scale driving pipeline: shifted-window encoders with skip-stage
fusion, segmentation and control heads, a from-scratch gradient tape,
and leaderboard-style scoring."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, grad_check
from .errors import (ConfigError, ContractError, CorruptDataError, DataError,
                     NumericError, ShapeError, SkgeError)

__all__ = [
    "Tape", "Tensor", "grad_check",
    "SkgeError", "ShapeError", "ContractError", "ConfigError",
    "NumericError", "DataError", "CorruptDataError",
    "__version__",
]
