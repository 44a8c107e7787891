"""Semantic-spectral knowledge distillation for spatiotemporal forecasting, in numpy."""
from ._accel import backend_name
from .config import ExperimentConfig
from .errors import (
    ChecksumError,
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    InputError,
    S2KDError,
)

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "ExperimentConfig",
    "FormatError",
    "InputError",
    "S2KDError",
    "backend_name",
]
