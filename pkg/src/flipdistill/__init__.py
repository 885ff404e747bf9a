"""Flipped knowledge distillation for text matching, at desk scale."""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
