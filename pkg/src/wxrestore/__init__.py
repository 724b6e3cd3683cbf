"""Multi-weather image restoration with task queries, FFC skips and adaptive mixup."""

from wxrestore.config import NetworkConfig, TrainConfig
from wxrestore.errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    ShapeError,
    SpecError,
)

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig",
    "TrainConfig",
    "CheckpointError",
    "ConfigError",
    "NumericError",
    "ShapeError",
    "SpecError",
]
