"""Export operation module for lsiquant."""

from .export_operation import ExportOperation

__all__ = ["ExportOperation"]
