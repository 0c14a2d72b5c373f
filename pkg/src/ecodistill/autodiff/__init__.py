"""Reverse-mode automatic differentiation."""

from . import core as ops
from .check import BoundedParam, bounded, gradient_check, gradient_errors, raw_for
from .core import Gradients, Tape, Var, is_var, value

__all__ = [
    "ops", "Tape", "Var", "Gradients", "value", "is_var",
    "BoundedParam", "bounded", "raw_for", "gradient_check", "gradient_errors",
]
