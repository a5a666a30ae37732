"""Evaluate operation module for lsiquant."""

from .evaluate_operation import EvaluateOperation

__all__ = ["EvaluateOperation"]
