"""JCTNet: weakly supervised crowd counting with a joint CNN and Swin-style Transformer."""

from .config import RunConfig
from .model import JCTNetModel, ModelConfig, build_model, count_parameters
from .tensor import Tensor, no_grad

__all__ = ["JCTNetModel", "ModelConfig", "RunConfig", "Tensor", "build_model", "count_parameters", "no_grad"]
__version__ = "0.1.0"
