"""Ablate operation module for lsiquant."""

from .ablate_operation import AblateOperation

__all__ = ["AblateOperation"]
