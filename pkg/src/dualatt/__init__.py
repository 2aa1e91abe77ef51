"""Dual attention supervision for a small anchor-based FPN detector."""

from .autodiff import Tensor, backward, finite_diff_check

__all__ = ["Tensor", "backward", "finite_diff_check"]
__version__ = "0.1.0"
