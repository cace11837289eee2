"""Linear-time spatio-temporal synchronous graph convolution forecaster on a small numpy autodiff engine."""

from .config import Ablations, ModelConfig
from .model import FasterSTS, forward, mae_loss, metrics
from .tensor import Tape, Tensor, backward, no_grad

__all__ = [
    "Ablations",
    "FasterSTS",
    "ModelConfig",
    "Tape",
    "Tensor",
    "backward",
    "forward",
    "mae_loss",
    "metrics",
    "no_grad",
]

__version__ = "0.1.0"
