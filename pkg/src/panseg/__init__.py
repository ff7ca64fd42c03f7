"""panseg: pyramid-attention semantic segmentation on a self-contained
float64 autodiff core."""

from .tensor import Tensor, Tape, backward

__all__ = ["Tensor", "Tape", "backward"]
__version__ = "0.1.0"
