"""Multimodal triplet-network classifier for small, imbalanced specimen collections."""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor, backward, grad_check  # noqa: E402

__all__ = ["Parameter", "Tape", "Tensor", "backward", "grad_check", "__version__"]
