"""Desk-scale mixture-of-experts routing laboratory."""

__version__ = "0.1.0"

from .rng import RngStream
from .tensor import NumericsError, Tensor, no_grad

__all__ = ["RngStream", "NumericsError", "Tensor", "no_grad", "__version__"]
