"""
Generate Operation - Synthetic assets

Writes a seeded toy model plus calibration, evaluation and held-out
token files that the other operations consume.
"""

import logging
from pathlib import Path
from typing import Dict, Any

from ...core.model_io import write_calib_tokens, write_model
from ...core.toy_model import (ModelSpec, channel_norm_ratio, fit_readout, fp,
                               make_synthetic_data, make_synthetic_model, perplexity)

logger = logging.getLogger(__name__)

MODEL_FILE = "model.lsq"
CALIB_FILE = "calib.txt"
EVAL_FILE = "eval.txt"
HELDOUT_FILE = "heldout.txt"


class GenerateOperation:
    """Handles generation of synthetic models and data."""

    def __init__(self, defaults: Dict[str, Any]):
        self.defaults = defaults

    def execute(self, action: str, params: Dict[str, Any], context: Dict[str, Any]) -> Dict[str, Any]:
        if action == "model":
            return self._generate(params)
        return {
            "success": False,
            "error": f"Unknown generate action: {action}",
            "exit_code": 2,
            "available_actions": ["model"]
        }

    def get_capabilities(self) -> Dict[str, Any]:
        return {
            "actions": ["model"],
            "description": "Seeded synthetic decoder model with Markov token data",
            "python_packages": ["numpy", "jsonschema"]
        }

    def _generate(self, params: Dict[str, Any]) -> Dict[str, Any]:
        out_dir = Path(params.get("output_dir", "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = int(params.get("seed", self.defaults["training"]["seed"]))
        data_cfg = self.defaults["data"]

        spec_fields = dict(self.defaults["model"])
        spec_fields.update({k: params[k] for k in ModelSpec.__dataclass_fields__
                            if params.get(k) is not None})
        spec = ModelSpec.from_dict(spec_fields)

        n_calib = int(params.get("calib_samples") or data_cfg["calib_samples"])
        n_eval = int(params.get("eval_samples") or data_cfg["eval_samples"])
        heldout_chain = int(params.get("heldout_chain", data_cfg["heldout_chain"]))

        # Distinct sampling seeds, one shared source for calib and eval.
        calib = make_synthetic_data(spec, seed * 4 + 1, n_calib)
        eval_set = make_synthetic_data(spec, seed * 4 + 2, n_eval)
        heldout = make_synthetic_data(spec, seed * 4 + 3, n_eval, chain=heldout_chain)

        model = make_synthetic_model(spec, seed)
        if params.get("fit_readout", True):
            model = fit_readout(model, calib, ridge=data_cfg["ridge"])

        paths = {
            "model_path": str(out_dir / MODEL_FILE),
            "calib_path": str(out_dir / CALIB_FILE),
            "eval_path": str(out_dir / EVAL_FILE),
            "heldout_path": str(out_dir / HELDOUT_FILE),
        }
        write_model(paths["model_path"], model)
        write_calib_tokens(paths["calib_path"], calib.tokens)
        write_calib_tokens(paths["eval_path"], eval_set.tokens)
        write_calib_tokens(paths["heldout_path"], heldout.tokens)

        return {
            "success": True,
            "message": f"Generated {spec.n_layers}-layer model (seed {seed}) in {out_dir}",
            **paths,
            "spec": spec.to_dict(),
            "seed": seed,
            "channel_norm_ratio": channel_norm_ratio(model),
            "fp_perplexity": perplexity(model, eval_set, fp()),
        }
