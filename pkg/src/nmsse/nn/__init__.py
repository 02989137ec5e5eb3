"""From-scratch differentiable network stack built on numpy arrays."""

from .autodiff import Tensor, concat, gradient_check
from .layers import (
    AFF,
    IAFF,
    Affine,
    BatchNorm,
    Conv1d,
    Downsample,
    LSTMStack,
    MSCAM,
    PWConv,
    downsample_geometry,
    global_avg_pool,
)
from .model import ForecastNet, ModelConfig, load_checkpoint, save_checkpoint
from .train import (
    ForecastResult,
    SearchError,
    TrainConfig,
    TrainedModel,
    forecast,
    grid_search,
    train,
)

__all__ = [
    "Tensor",
    "concat",
    "gradient_check",
    "Conv1d",
    "Downsample",
    "downsample_geometry",
    "PWConv",
    "BatchNorm",
    "LSTMStack",
    "Affine",
    "MSCAM",
    "AFF",
    "IAFF",
    "global_avg_pool",
    "ModelConfig",
    "ForecastNet",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "TrainedModel",
    "train",
    "grid_search",
    "forecast",
    "ForecastResult",
    "SearchError",
]
