"""Multimodal glottic-carcinoma classifier on a small numpy autodiff engine."""

from .checkpoint import Checkpoint
from .config import ModelConfig, RunConfig, TrainConfig
from .errors import MMGCError
from .fusion import MMGCNet
from .tensor import Tensor, backward, no_grad, precision

__all__ = ["Checkpoint", "MMGCError", "MMGCNet", "ModelConfig", "RunConfig", "Tensor", "TrainConfig",
           "backward", "no_grad", "precision"]
__version__ = "0.1.0"
