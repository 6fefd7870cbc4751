"""Multivariate sensor prognostics: per-sensor quantile regression, a deep
encoder/decoder forecaster, gated temporal attention over its hidden states,
and a spiking classifier emitting a continuous anomaly score."""

from .autodiff import Tensor, backward
from .exceptions import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    EqsnnError,
    NumericError,
    ShapeError,
    TrainingAbort,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "EqsnnError",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "ShapeError",
    "TrainingAbort",
    "CheckpointError",
    "__version__",
]
