"""MoE-FFD: mixture-of-experts parameter-efficient fine-tuning for face forgery detection, on a numpy autodiff core."""

from .config import ModelConfig, RunConfig, TrainConfig, preset
from .errors import CheckpointError, ConfigError, DegenerateGateError, DimensionError, MoEFFDError, NumericError
from .model import MoEFFDModel, count_params, model_forward, predict, total_loss, train

__all__ = [
    "ModelConfig", "RunConfig", "TrainConfig", "preset",
    "MoEFFDError", "DimensionError", "ConfigError", "NumericError", "DegenerateGateError", "CheckpointError",
    "MoEFFDModel", "count_params", "model_forward", "predict", "total_loss", "train",
]

__version__ = "0.1.0"
