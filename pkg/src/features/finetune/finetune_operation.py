"""
Finetune Operation - Retrain the last layers of a quantized model

Only the last L blocks are recalibrated against a full-precision
reference on a target dataset; all earlier blocks keep their codes.
"""

import logging
from pathlib import Path
from typing import Dict, Any

from ...core.calib_trainer import finetune_last_layers, hidden_mse
from ...core.errors import ConfigurationError
from ...core.model_io import load_calib, read_model, write_model
from ...core.run_spec import forward_mode, infer_mode, train_config

logger = logging.getLogger(__name__)


class FinetuneOperation:
    """Handles last-layer finetuning."""

    def __init__(self, defaults: Dict[str, Any]):
        self.defaults = defaults

    def execute(self, action: str, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        if action == "last_layers":
            return self._finetune(params, context)
        return {
            "success": False,
            "error": f"Unknown finetune action: {action}",
            "exit_code": 2,
            "available_actions": ["last_layers"]
        }

    def get_capabilities(self) -> Dict[str, Any]:
        return {
            "actions": ["last_layers"],
            "description": "Recalibrate LSI, then smoothing, on the last L layers",
            "python_packages": ["numpy"]
        }

    def _finetune(self, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        model_path = params.get("model") or context.get("last_model")
        reference_path = params.get("reference")
        calib_path = params.get("calib")
        if not model_path or not reference_path or not calib_path:
            return {"success": False, "exit_code": 2,
                    "error": "Quantized model, full-precision reference and target data are required"}

        model = read_model(model_path)
        reference = read_model(reference_path)
        mode = infer_mode(model, params.get("act_bits"), bool(params.get("act_per_sequence")))
        if mode.is_fp:
            raise ConfigurationError(f"{model_path} is not quantized", hint="Run quantize first")
        if params.get("setting"):
            requested = forward_mode(params, self.defaults)
            if requested.weight_config() != mode.weight_config():
                raise ConfigurationError(
                    f"model is quantized as {mode.label}, not {requested.label}")
            mode = requested
        cfg = train_config(params, self.defaults, mode, finetune=True)

        target = load_calib(calib_path, params.get("calib_format", "tokens"), vocab=model.spec.vocab)
        heldout = None
        if params.get("heldout"):
            heldout = load_calib(params["heldout"], "tokens", vocab=model.spec.vocab)
            heldout_before = hidden_mse(model, reference, heldout, mode)

        target_before = hidden_mse(model, reference, target, mode)
        result = finetune_last_layers(model, reference, target, cfg, mode)
        target_after = hidden_mse(result.model, reference, target, mode)

        output = params.get("output") or str(Path(model_path).with_name(
            f"{Path(model_path).stem}_ft{cfg.finetune_last}.lsq"))
        write_model(output, result.model)

        report = {
            "success": True,
            "message": f"Finetuned the last {cfg.finetune_last} layers: "
                       f"target loss {target_before:.4g} -> {target_after:.4g}",
            "model_path": output,
            "setting": mode.label,
            "finetune_last": cfg.finetune_last,
            "kept": bool(result.params),
            "target_loss_before": target_before,
            "target_loss_after": target_after,
            "layers": result.layers,
        }
        if heldout is not None:
            heldout_after = hidden_mse(result.model, reference, heldout, mode)
            report["heldout_loss_before"] = heldout_before
            report["heldout_loss_after"] = heldout_after
            logger.info(f"Held-out loss {heldout_before:.4g} -> {heldout_after:.4g}")
        return report
