from .config import BtdaConfig, ConfigError, EncoderConfig, LossWeights, ModelConfig, SscaConfig, TrainConfig
from .evaluate import EvalResult, Prediction, evaluate, evaluate_masks, infer, overlay, predict
from .model import ForwardResult, Model, bce, downsample_mask, encode, forward, total_loss, upsample_mask
from .train import TrainingDiverged, TrainState, train

__all__ = [
    "BtdaConfig",
    "ConfigError",
    "EncoderConfig",
    "EvalResult",
    "ForwardResult",
    "LossWeights",
    "Model",
    "ModelConfig",
    "Prediction",
    "SscaConfig",
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "bce",
    "downsample_mask",
    "encode",
    "evaluate",
    "evaluate_masks",
    "forward",
    "infer",
    "overlay",
    "predict",
    "total_loss",
    "train",
    "upsample_mask",
]
