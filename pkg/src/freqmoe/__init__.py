"""Desk-scale all-in-one image restoration with embedding-routed frequency experts."""

from .autodiff import Tensor, Parameter, backward

__all__ = ["Tensor", "Parameter", "backward"]
__version__ = "0.1.0"
