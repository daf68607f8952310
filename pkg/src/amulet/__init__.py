"""AmuletNet salient object detection on a small numpy autodiff engine."""

from .model import AmuletNet, HeadsConfig, ModelConfig
from .tensor import Parameter, Tape, Tensor

__all__ = ["AmuletNet", "HeadsConfig", "ModelConfig", "Parameter", "Tape", "Tensor"]
__version__ = "0.1.0"
