"""Generate operation module for lsiquant."""

from .generate_operation import GenerateOperation

__all__ = ["GenerateOperation"]
