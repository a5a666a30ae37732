"""
Ablate Operation - Component contribution table

Runs the calibration pipeline once per configured variant (full,
no LSI, no smoothing, no clipping, square block sizes, ...) on the
same model and calibration set and tabulates the losses.
"""

import logging
from typing import Dict, Any, List, Optional

from ...core.calib_trainer import calibrate_model
from ...core.config_loader import load_ablations
from ...core.model_io import load_calib, read_model
from ...core.run_spec import forward_mode, train_config

logger = logging.getLogger(__name__)

VARIANT_FLAGS = {
    "train_lsi": "no_lsi",
    "train_smooth": "no_smooth",
    "train_lwc": "no_lwc",
}


class AblateOperation:
    """Handles ablation suites."""

    def __init__(self, defaults: Dict[str, Any], config_dir=None):
        self.defaults = defaults
        self.config_dir = config_dir

    def execute(self, action: str, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        if action == "run":
            return self._run(params, context)
        elif action == "variants":
            return {"success": True, "variants": self._variants(params.get("variants"))}
        return {
            "success": False,
            "error": f"Unknown ablate action: {action}",
            "exit_code": 2,
            "available_actions": ["run", "variants"]
        }

    def get_capabilities(self) -> Dict[str, Any]:
        return {
            "actions": ["run", "variants"],
            "description": "Loss table over pipeline variants",
            "python_packages": ["numpy", "jsonschema"]
        }

    def _variants(self, names: Optional[List[str]] = None) -> List[Dict[str, Any]]:
        variants = load_ablations(self.config_dir)["variants"]
        if names:
            variants = [v for v in variants if v["name"] in names]
        return variants

    def _variant_params(self, base: Dict[str, Any], variant: Dict[str, Any]) -> Dict[str, Any]:
        params = dict(base)
        for key, flag in VARIANT_FLAGS.items():
            if key in variant:
                params[flag] = not variant[key]
        for key in ("square_n", "init", "propagate_errors"):
            if key in variant:
                params[key] = variant[key]
        return params

    def _run(self, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        model_path = params.get("model") or context.get("last_model")
        calib_path = params.get("calib") or context.get("last_calib")
        if not model_path or not calib_path:
            return {"success": False, "error": "Model and calibration paths are required", "exit_code": 2}

        mode = forward_mode(params, self.defaults)
        model = read_model(model_path)
        calib = load_calib(calib_path, params.get("calib_format", "tokens"), vocab=model.spec.vocab)

        rows = []
        for variant in self._variants(params.get("variants")):
            name = variant["name"]
            if variant.get("requires_group") and not mode.group_size:
                rows.append({"variant": name, "skipped": True,
                             "reason": "needs group-wise quantization"})
                continue
            cfg = train_config(self._variant_params(params, variant), self.defaults, mode)
            logger.info(f"Ablation variant {name}")
            result = calibrate_model(model, calib, cfg, mode)
            rows.append({
                "variant": name,
                "skipped": False,
                "mean_loss": result.mean_loss,
                "mean_rtn_loss": result.mean_rtn_loss,
                "layer_losses": [r["loss"] for r in result.layers],
                "square_n": cfg.square_n,
            })

        return {
            "success": True,
            "message": f"Ran {sum(not r['skipped'] for r in rows)} ablation variants at {mode.label}",
            "setting": mode.label,
            "rows": rows,
        }
