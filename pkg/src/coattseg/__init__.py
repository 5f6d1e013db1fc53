"""Desk-scale co-attention Siamese segmentation with a verifiable autodiff core."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "no_grad", "__version__"]
