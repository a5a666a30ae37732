"""
Evaluate Operation - Perplexity and reconstruction metrics
"""

import logging
from typing import Dict, Any

from ...core.model_io import load_calib, read_model
from ...core.run_spec import forward_mode, infer_mode
from ...core.tensor_core import frobenius_mse
from ...core.toy_model import ForwardMode, block_outputs, final_hidden, perplexity

logger = logging.getLogger(__name__)


class EvaluateOperation:
    """Handles evaluation of float and quantized models."""

    def __init__(self, defaults: Dict[str, Any]):
        self.defaults = defaults

    def execute(self, action: str, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        if action == "model":
            return self._evaluate(params, context)
        return {
            "success": False,
            "error": f"Unknown evaluate action: {action}",
            "exit_code": 2,
            "available_actions": ["model"]
        }

    def get_capabilities(self) -> Dict[str, Any]:
        return {
            "actions": ["model"],
            "description": "Perplexity, end-to-end MSE and per-layer losses against a reference",
            "python_packages": ["numpy"]
        }

    def _mode(self, params: Dict[str, Any], model) -> ForwardMode:
        explicit = any(params.get(k) is not None for k in ("setting", "bits", "act_bits", "group_size"))
        if explicit:
            return forward_mode(params, self.defaults)
        return infer_mode(model, act_per_sequence=bool(params.get("act_per_sequence")))

    def _evaluate(self, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        model_path = params.get("model") or context.get("last_model")
        data_path = params.get("data")
        if not model_path or not data_path:
            return {"success": False, "error": "Model and data paths are required", "exit_code": 2}

        model = read_model(model_path)
        mode = self._mode(params, model)
        data = load_calib(data_path, "tokens", vocab=model.spec.vocab)
        result = {
            "success": True,
            "model_path": model_path,
            "setting": mode.label,
            "perplexity": perplexity(model, data, mode),
            "n_samples": data.n_samples,
        }

        reference_path = params.get("reference")
        if reference_path:
            reference = read_model(reference_path)
            fp_mode = ForwardMode()
            result["end_to_end_mse"] = frobenius_mse(final_hidden(model, data, mode),
                                                     final_hidden(reference, data, fp_mode))
            ref_outputs = block_outputs(reference, data, fp_mode)
            outputs = block_outputs(model, data, mode)
            result["layer_losses"] = [frobenius_mse(o, r) for o, r in zip(outputs[1:], ref_outputs[1:])]
            result["reference_perplexity"] = perplexity(reference, data, fp_mode)

        result["message"] = f"{mode.label} perplexity {result['perplexity']:.4f} on {data.n_samples} sequences"
        return result
