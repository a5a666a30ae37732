"""
Quantize Operation - Layerwise calibration

Calibrates every block of a float model at a weight (and optionally
activation) setting, folds the result and writes the quantized model
together with a per-layer report.
"""

import logging
from pathlib import Path
from typing import Dict, Any

from ...core.calib_trainer import calibrate_model
from ...core.errors import ConfigurationError
from ...core.model_io import load_calib, read_model, write_model
from ...core.run_spec import forward_mode, train_config
from ...core.toy_model import STATE_QUANTIZED

logger = logging.getLogger(__name__)


class QuantizeOperation:
    """
    Handles quantization:
    - calibrate: LSI + smoothing + clipping, layer by layer
    - rtn: round-to-nearest baseline through the same pipeline
    """

    def __init__(self, defaults: Dict[str, Any]):
        self.defaults = defaults

    def execute(self, action: str, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        if action == "calibrate":
            return self._quantize(params, context)
        elif action == "rtn":
            return self._quantize(dict(params, no_lsi=True, no_smooth=True, no_lwc=True), context)
        return {
            "success": False,
            "error": f"Unknown quantize action: {action}",
            "exit_code": 2,
            "available_actions": ["calibrate", "rtn"]
        }

    def get_capabilities(self) -> Dict[str, Any]:
        return {
            "actions": ["calibrate", "rtn"],
            "description": "Post-training quantization with learnable singular value increments",
            "python_packages": ["numpy"]
        }

    def _quantize(self, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        model_path = params.get("model") or context.get("last_model")
        calib_path = params.get("calib") or context.get("last_calib")
        if not model_path or not calib_path:
            return {"success": False, "error": "Model and calibration paths are required", "exit_code": 2}

        mode = forward_mode(params, self.defaults)
        cfg = train_config(params, self.defaults, mode)
        model = read_model(model_path)
        if any(lin.state == STATE_QUANTIZED for b in model.blocks for lin in b.linears().values()):
            raise ConfigurationError(f"{model_path} is already quantized",
                                     hint="Quantize the float model, or use finetune on this one")
        calib = load_calib(calib_path, params.get("calib_format", "tokens"), vocab=model.spec.vocab)

        result = calibrate_model(model, calib, cfg, mode)
        output = params.get("output") or str(Path(model_path).with_name(
            f"{Path(model_path).stem}_{mode.label}.lsq"))
        write_model(output, result.model)

        layers = result.layers
        if not params.get("trace", True):
            layers = [{k: v for k, v in r.items() if k != "trace"} for r in layers]
        k_enabled = any(n > 0 for r in result.layers for n in r["square_n"].values())
        reduction = 0.0
        if result.mean_rtn_loss > 0:
            reduction = 100.0 * (result.mean_rtn_loss - result.mean_loss) / result.mean_rtn_loss
        return {
            "success": True,
            "message": f"Quantized {len(layers)} layers at {mode.label}: "
                       f"mean loss {result.mean_loss:.4g} vs RTN {result.mean_rtn_loss:.4g}",
            "model_path": output,
            "setting": mode.label,
            "k_enabled": k_enabled,
            "mean_rtn_loss": result.mean_rtn_loss,
            "mean_loss": result.mean_loss,
            "reduction_pct": reduction,
            "lsi_budget": cfg.max_trainable_fraction,
            "train_config": {
                "learning_rate": cfg.learning_rate, "smooth_lr": cfg.smooth_lr,
                "clip_lr": cfg.clip_lr, "epochs": cfg.epochs, "seed": cfg.seed,
                "train_lsi": cfg.train_lsi, "train_smooth": cfg.train_smooth,
                "train_lwc": cfg.train_lwc, "square_n": cfg.square_n,
                "propagate_errors": cfg.propagate_errors,
            },
            "layers": layers,
        }
