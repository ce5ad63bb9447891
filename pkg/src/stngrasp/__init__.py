"""Multi-stage spatial-transformer grasp detection on numpy."""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, ContractError, NumericError, ShapeError
from .geometry import GraspRect, is_success, jaccard
from .pipeline import GraspDetector, ModelConfig, build_model
from .tensor import Tensor, backward, no_grad

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "NumericError", "ShapeError",
    "GraspRect", "is_success", "jaccard",
    "GraspDetector", "ModelConfig", "build_model",
    "Tensor", "backward", "no_grad",
]
