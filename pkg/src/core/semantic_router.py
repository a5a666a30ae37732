"""
Semantic Router for lsiquant

Routes pipeline operations to their handlers, turns failures into
structured results and attaches next-step hints.
"""

import logging
from pathlib import Path
from typing import Dict, Any, List, Optional

from .config_loader import load_workflows
from .errors import LsiQuantError

logger = logging.getLogger(__name__)


class SemanticRouter:
    """Routes operations to handlers with workflow awareness."""

    def __init__(self, config_dir: Optional[Path] = None):
        self.config_dir = config_dir
        self.workflows = load_workflows(config_dir)
        self.operation_handlers = {}
        self.current_context: Dict[str, Any] = {}

    def register_operation(self, name: str, handler: Any) -> None:
        """Register an operation handler."""
        self.operation_handlers[name] = handler

    def route(self, operation: str, action: str, params: Dict[str, Any]) -> Dict[str, Any]:
        """
        Route an operation to its handler.

        Args:
            operation: The operation (generate, quantize, evaluate, ...)
            action: The action within the operation
            params: Parameters for the operation

        Returns:
            Result dictionary with operation result and workflow hints
        """
        if operation not in self.operation_handlers:
            return {
                "success": False,
                "error": f"Unknown operation: {operation}",
                "error_type": "ConfigurationError",
                "exit_code": 2,
                "available_operations": list(self.operation_handlers.keys())
            }

        handler = self.operation_handlers[operation]
        try:
            result = handler.execute(action, params, self.current_context.copy())
        except LsiQuantError as e:
            logger.error(f"{operation}.{action} failed: {e}")
            result = e.to_result()
            result.setdefault("hint", self._get_error_hint(operation, str(e)))

        result = self._postprocess_result(operation, action, result)
        result = self._add_workflow_hints(operation, action, result)
        self._update_context(operation, result)
        return result

    def _postprocess_result(self, operation: str, action: str, result: Dict[str, Any]) -> Dict[str, Any]:
        """Ensure a consistent result structure."""
        if "success" not in result:
            result["success"] = "error" not in result
        if not result["success"] and "exit_code" not in result:
            result["exit_code"] = 2
        result["_metadata"] = {"operation": operation, "action": action}
        return result

    def _add_workflow_hints(self, operation: str, action: str, result: Dict[str, Any]) -> Dict[str, Any]:
        """Add next-step hints on success."""
        if not result.get("success", False):
            return result
        workflow_key = f"{operation}_{action}_completed"
        hints = self.workflows.get("workflow_hints", {}).get(workflow_key)
        if hints:
            result["workflow"] = {
                "message": hints.get("message", ""),
                "suggested_next": self._format_suggestions(hints.get("next_steps", []))
            }
        return result

    def _format_suggestions(self, suggestions: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """Format workflow suggestions for clear presentation."""
        formatted = []
        for suggestion in suggestions:
            formatted.append({
                "operation": suggestion["operation"],
                "action": suggestion["action"],
                "description": suggestion["hint"],
                "example": suggestion.get("example", ""),
                "command": f"{suggestion['operation']}(action='{suggestion['action']}')"
            })
        return formatted

    def _update_context(self, operation: str, result: Dict[str, Any]) -> None:
        """Remember the last written model so later calls can default to it."""
        if not result.get("success", False):
            return
        if result.get("model_path"):
            self.current_context["last_model"] = result["model_path"]
        if operation == "generate" and result.get("calib_path"):
            self.current_context["last_calib"] = result["calib_path"]

    def _get_error_hint(self, operation: str, error: str) -> str:
        """Hints for common failures."""
        error_lower = error.lower()
        if "not found" in error_lower:
            return "Check the path; 'lsiquant gen' writes a model and calibration files to start from"
        if "quantized" in error_lower and operation == "evaluate":
            return "Pass the setting the model was quantized with (--setting)"
        if "diverged" in error_lower:
            return "Lower --lr or reduce --epochs"
        return f"Run 'lsiquant {operation} --help' for the accepted flags"
