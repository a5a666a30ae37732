"""
Configuration loading for lsiquant.

Files are looked up in order: an explicit directory, the development
tree next to the sources, the installed `config` package, then the
LSIQUANT_CONFIG_DIR environment variable. A file found nowhere falls
back to the built-in default. Every file is checked against its JSON
schema.
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import jsonschema

try:
    from importlib import resources
except ImportError:
    import importlib_resources as resources

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

CONFIG_ENV = "LSIQUANT_CONFIG_DIR"

DEFAULTS_FILE = "defaults.json"
WORKFLOWS_FILE = "workflows.json"
ABLATIONS_FILE = "ablations.json"

BUILTIN_DEFAULTS: Dict[str, Any] = {
    "model": {
        "n_layers": 4, "width": 64, "n_heads": 4, "vocab": 256, "mlp_ratio": 4,
        "seq_len": 32, "outlier_fraction": 0.05, "outlier_scale": 10.0, "weight_df": 8.0,
    },
    "data": {"calib_samples": 32, "eval_samples": 32, "heldout_chain": 1, "ridge": 0.01},
    "quantization": {"setting": "w4a16"},
    "training": {
        "learning_rate": 2e-4, "smooth_lr": 1e-2, "clip_lr": 5e-2, "weight_decay": 0.0,
        "epochs": 2, "batch_size": 4, "seed": 0,
        "ste_clip": True, "propagate_errors": True, "init": "zeros",
    },
    "lsi": {"max_trainable_fraction": 0.05, "square_n": None, "divergence_factor": 10.0},
    "finetune": {"last": 2, "epochs": 10},
}

_number = {"type": "number"}
_positive_int = {"type": "integer", "minimum": 1}

SCHEMAS: Dict[str, Dict[str, Any]] = {
    DEFAULTS_FILE: {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "model": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "n_layers": _positive_int, "width": _positive_int, "n_heads": _positive_int,
                    "vocab": {"type": "integer", "minimum": 2}, "mlp_ratio": _positive_int,
                    "seq_len": _positive_int,
                    "outlier_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                    "outlier_scale": {"type": "number", "exclusiveMinimum": 0},
                    "weight_df": {"type": "number", "exclusiveMinimum": 2},
                },
            },
            "data": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "calib_samples": _positive_int, "eval_samples": _positive_int,
                    "heldout_chain": {"type": "integer", "minimum": 0},
                    "ridge": {"type": "number", "exclusiveMinimum": 0},
                },
            },
            "quantization": {
                "type": "object",
                "additionalProperties": False,
                "properties": {"setting": {"type": "string", "pattern": "^(fp|w\\d+a\\d+(g\\d+)?)$"}},
            },
            "training": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                    "smooth_lr": {"type": "number", "exclusiveMinimum": 0},
                    "clip_lr": {"type": "number", "exclusiveMinimum": 0},
                    "weight_decay": {"type": "number", "minimum": 0},
                    "epochs": _positive_int, "batch_size": _positive_int,
                    "seed": {"type": "integer", "minimum": 0},
                    "ste_clip": {"type": "boolean"}, "propagate_errors": {"type": "boolean"},
                    "init": {"enum": ["zeros", "random"]},
                },
            },
            "lsi": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "max_trainable_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "square_n": {"type": ["integer", "null"], "minimum": 0},
                    "divergence_factor": {"type": "number", "exclusiveMinimum": 1},
                },
            },
            "finetune": {
                "type": "object",
                "additionalProperties": False,
                "properties": {"last": _positive_int, "epochs": _positive_int},
            },
        },
    },
    WORKFLOWS_FILE: {
        "type": "object",
        "required": ["workflow_hints"],
        "properties": {
            "workflow_hints": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "properties": {
                        "message": {"type": "string"},
                        "next_steps": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["operation", "action", "hint"],
                                "properties": {
                                    "operation": {"type": "string"},
                                    "action": {"type": "string"},
                                    "hint": {"type": "string"},
                                    "example": {"type": "string"},
                                },
                            },
                        },
                    },
                },
            },
        },
    },
    ABLATIONS_FILE: {
        "type": "object",
        "required": ["variants"],
        "properties": {
            "variants": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["name"],
                    "additionalProperties": False,
                    "properties": {
                        "name": {"type": "string"},
                        "train_lsi": {"type": "boolean"},
                        "train_smooth": {"type": "boolean"},
                        "train_lwc": {"type": "boolean"},
                        "propagate_errors": {"type": "boolean"},
                        "init": {"enum": ["zeros", "random"]},
                        "square_n": {"type": "integer", "minimum": 0},
                        "requires_group": {"type": "boolean"},
                    },
                },
            },
        },
    },
}

BUILTIN_ABLATIONS = {"variants": [{"name": "full"}, {"name": "no_lsi", "train_lsi": False}]}


def _read_config_text(filename: str, config_dir: Optional[Path]) -> Optional[str]:
    if config_dir:
        path = Path(config_dir) / filename
        return path.read_text() if path.exists() else None

    # 1. Development tree
    dev_path = Path(__file__).parent.parent.parent / "config" / filename
    if dev_path.exists():
        return dev_path.read_text()

    # 2. Installed package data
    try:
        return resources.files("config").joinpath(filename).read_text()
    except Exception:
        pass

    # 3. Environment override
    env_dir = os.getenv(CONFIG_ENV)
    if env_dir:
        env_path = Path(env_dir) / filename
        if env_path.exists():
            return env_path.read_text()
    return None


def validate_config(filename: str, data: Any) -> None:
    """Raise ConfigurationError naming the JSON path of the first schema violation."""
    schema = SCHEMAS.get(filename)
    if schema is None:
        return
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"{filename}: {where}: {e.message}",
                                 hint=f"Fix {filename} or unset {CONFIG_ENV}")


def load_config_file(filename: str, default: Dict[str, Any],
                     config_dir: Optional[Path] = None) -> Dict[str, Any]:
    """Load and validate one configuration file, falling back to default."""
    text = _read_config_text(filename, config_dir)
    if text is None:
        logger.debug(f"{filename} not found, using built-in default")
        return copy.deepcopy(default)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{filename} is not valid JSON: {e.msg} (line {e.lineno})")
    validate_config(filename, data)
    return data


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_defaults(config_dir: Optional[Path] = None) -> Dict[str, Any]:
    """Defaults file merged over the built-in values, so partial files are fine."""
    return _merge(BUILTIN_DEFAULTS, load_config_file(DEFAULTS_FILE, {}, config_dir))


def load_ablations(config_dir: Optional[Path] = None) -> Dict[str, Any]:
    return load_config_file(ABLATIONS_FILE, BUILTIN_ABLATIONS, config_dir)


def load_workflows(config_dir: Optional[Path] = None) -> Dict[str, Any]:
    return load_config_file(WORKFLOWS_FILE, {"workflow_hints": {}}, config_dir)
