"""Object-aware temporal grounding: encoders, point heads, training and evaluation on numpy."""

from .encoders import GroundingModel, ModelConfig
from .errors import ConfigError, DataError, FormatError, GradcheckError, ObjectNLQError, ShapeError
from .metrics import EvalReport, evaluate
from .postprocess import SegmentPrediction, ensemble_merge, soft_nms
from .training import TrainConfig, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "EvalReport",
    "FormatError",
    "GradcheckError",
    "GroundingModel",
    "ModelConfig",
    "ObjectNLQError",
    "SegmentPrediction",
    "ShapeError",
    "TrainConfig",
    "ensemble_merge",
    "evaluate",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "soft_nms",
    "train",
]
