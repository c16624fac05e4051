"""Multi-modal intermediate-feature-interaction autoencoder for survival
prediction, on a small numpy autodiff engine."""

from .model import ModelConfig, forward, forward_batch, init_params
from .tensor import Tensor, backward

__all__ = ["ModelConfig", "Tensor", "backward", "forward", "forward_batch", "init_params"]
__version__ = "0.1.0"
