"""Landmark detection with selective dilated convolutions and a hierarchical
recurrent spatial transformer, implemented on plain numpy."""

from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    FormatError,
    NumericError,
    SingularityError,
)
from .model import ModelConfig, build_model, forward, loss_and_grads
from .train import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateInputError", "DimensionError", "DivergenceError", "FormatError", "NumericError",
    "SingularityError", "ModelConfig", "build_model", "forward", "loss_and_grads", "RunReport", "TrainConfig",
    "evaluate", "train",
]
