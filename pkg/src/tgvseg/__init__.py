"""Desk-scale binary segmentation engine.

An encoder-decoder network with nested dense skip connections whose decoder
doubles resolution either by closed-form bilinear interpolation regularized
by a learnable second-order total-generalized-variation energy, or by the
transposed-convolution baseline kept for artifact comparison. Everything is
built from rank-4 tensors with explicit, finite-difference-checkable
backward passes.
"""

from .backend import KERNEL_BACKEND
from .tensor import Param, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "Param", "KERNEL_BACKEND", "__version__"]
