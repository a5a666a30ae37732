"""
lsiquant Semantic Entry Point

Integrates the pipeline operations behind one API used by both the
command line and the MCP tool server.
"""

from pathlib import Path
from typing import Dict, Any, Optional

from .core.config_loader import load_defaults
from .core.operation_registry import OperationRegistry
from .core.semantic_router import SemanticRouter
from .features.ablate import AblateOperation
from .features.evaluate import EvaluateOperation
from .features.export import ExportOperation
from .features.finetune import FinetuneOperation
from .features.generate import GenerateOperation
from .features.quantize import QuantizeOperation


class LsiQuantSemantic:
    """
    Main interface for lsiquant.

    Accepts (operation, action, params), routes to the operation,
    and returns a result dictionary with next-step hints.
    """

    def __init__(self, config_dir: Optional[Path] = None):
        self.config_dir = config_dir
        self.defaults = load_defaults(config_dir)
        self.router = SemanticRouter(config_dir)
        self.registry = OperationRegistry()
        self._register_operations()

    def _register_operations(self):
        operations = {
            "generate": GenerateOperation(self.defaults),
            "quantize": QuantizeOperation(self.defaults),
            "evaluate": EvaluateOperation(self.defaults),
            "finetune": FinetuneOperation(self.defaults),
            "export": ExportOperation(self.defaults),
            "ablate": AblateOperation(self.defaults, self.config_dir),
        }
        for name, op in operations.items():
            self.registry.register(name, op)
            self.router.register_operation(name, op)

    def execute(self, operation: str, action: str, params: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Execute an operation.

        Args:
            operation: generate, quantize, evaluate, finetune, export or ablate
            action: The action within the operation
            params: Parameters for the operation

        Returns:
            Result dictionary
        """
        params = {k: v for k, v in (params or {}).items() if v is not None}
        result = self.router.route(operation, action, params)
        if not result.get("success") and "requirement" in result.get("error", "").lower():
            result["system_check"] = self.registry.check_system_requirements()
        return result

    def get_capabilities(self, operation: Optional[str] = None) -> Dict[str, Any]:
        if operation:
            return self.registry.get_capabilities(operation)
        return {name: self.registry.get_capabilities(name) for name in self.registry.list_operations()}
