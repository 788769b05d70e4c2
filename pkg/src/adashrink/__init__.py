"""Boundary-guided sequence shrinking for end-to-end speech-to-text translation."""

__version__ = "0.1.0"

from .tensor import Tensor

__all__ = ["Tensor", "__version__"]
