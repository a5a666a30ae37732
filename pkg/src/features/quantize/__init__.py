"""Quantize operation module for lsiquant."""

from .quantize_operation import QuantizeOperation

__all__ = ["QuantizeOperation"]
