"""
Error types for lsiquant.

The numeric core raises these; the operation layer turns them into
result dictionaries and the command line turns them into exit codes.
"""

from typing import Any, Dict, List, Optional


class LsiQuantError(Exception):
    """Base class for all lsiquant failures."""

    exit_code = 3
    hint: Optional[str] = None

    def __init__(self, message: str, hint: Optional[str] = None):
        super().__init__(message)
        if hint is not None:
            self.hint = hint

    def to_result(self) -> Dict[str, Any]:
        """Render as a failed operation result."""
        result = {
            "success": False,
            "error": str(self),
            "error_type": type(self).__name__,
            "exit_code": self.exit_code,
        }
        if self.hint:
            result["hint"] = self.hint
        return result


class ShapeError(LsiQuantError):
    """Operand shapes do not fit together."""


class DomainError(LsiQuantError):
    """A value lies outside the domain an operation accepts."""


class ConfigurationError(LsiQuantError):
    """Invalid configuration, flag combination, or state/mode mismatch."""

    exit_code = 2


class ParseError(LsiQuantError):
    """Malformed file contents."""

    def __init__(self, message: str, offset: Optional[int] = None,
                 line: Optional[int] = None, hint: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message, hint)
        self.offset = offset
        self.line = line

    def to_result(self) -> Dict[str, Any]:
        result = super().to_result()
        if self.offset is not None:
            result["offset"] = self.offset
        if self.line is not None:
            result["line"] = self.line
        return result


class TrainingError(LsiQuantError):
    """Calibration could not continue (e.g. a non-finite gradient)."""

    exit_code = 4

    def __init__(self, message: str, layer: Optional[int] = None,
                 parameter: Optional[str] = None,
                 trace: Optional[List[Dict[str, Any]]] = None,
                 hint: Optional[str] = None):
        super().__init__(message, hint)
        self.layer = layer
        self.parameter = parameter
        self.trace = trace or []

    def to_result(self) -> Dict[str, Any]:
        result = super().to_result()
        result["layer"] = self.layer
        if self.parameter is not None:
            result["parameter"] = self.parameter
        result["trace"] = self.trace
        return result


class DivergenceError(TrainingError):
    """Loss stayed above ten times its initial value for a whole epoch."""

    hint = "Lower --lr or reduce --epochs; the loss trace is attached"
