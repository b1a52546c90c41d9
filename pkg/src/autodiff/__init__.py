"""Reverse-mode differentiation engine, optimizer and checkpoints."""
from src.autodiff.tensor import Function, Tensor, as_tensor

__all__ = ["Function", "Tensor", "as_tensor"]
