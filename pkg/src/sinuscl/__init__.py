"""Supervised contrastive learning for 3D sinus volume classification.

A small numpy autodiff core (with compiled conv/sampling kernels when built),
the contrastive and cross-entropy objectives, a phantom corpus generator and
the nested cross-validation harness.
"""
from .kernels import BACKEND
from .tensor import Tensor, high_precision, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "high_precision", "no_grad", "__version__"]
