"""
Export Operation - Packed integer codes
"""

from pathlib import Path
from typing import Dict, Any

from ...core.model_io import export_model, read_model


class ExportOperation:
    """Writes folded models with bit-packed codes."""

    def __init__(self, defaults: Dict[str, Any]):
        self.defaults = defaults

    def execute(self, action: str, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        if action == "packed":
            return self._export(params, context)
        return {
            "success": False,
            "error": f"Unknown export action: {action}",
            "exit_code": 2,
            "available_actions": ["packed"]
        }

    def get_capabilities(self) -> Dict[str, Any]:
        return {
            "actions": ["packed"],
            "description": "Packed k-bit codes with f64 or f32 quantization parameters",
            "python_packages": ["numpy", "jsonschema"]
        }

    def _export(self, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        model_path = params.get("model") or context.get("last_model")
        if not model_path:
            return {"success": False, "error": "Model path is required", "exit_code": 2}
        output = params.get("output") or str(Path(model_path).with_suffix(".export.lsq"))
        scale_dtype = "f32" if params.get("f32_scales") else "f64"
        summary = export_model(output, read_model(model_path), scale_dtype)
        return {
            "success": True,
            "message": f"Exported {summary['code_bytes']} bytes of packed codes to {output}",
            "export_path": output,
            **summary,
        }
