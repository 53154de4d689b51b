"""Desk-scale mixture-of-xLSTM-experts language model with difficulty-biased routing."""

from .model import Model, ModelConfig
from .tensor import Tape, Tensor, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "Tape", "Tensor", "backward",
           "finite_diff_check", "__version__"]
