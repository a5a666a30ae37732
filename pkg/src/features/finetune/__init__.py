"""Finetune operation module for lsiquant."""

from .finetune_operation import FinetuneOperation

__all__ = ["FinetuneOperation"]
