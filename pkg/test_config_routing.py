#!/usr/bin/env python3
"""Tests for configuration loading, run settings and operation routing"""

import json

import pytest

from src.core.config_loader import (BUILTIN_DEFAULTS, load_ablations, load_defaults,
                                    load_workflows, validate_config)
from src.core.errors import ConfigurationError, ParseError
from src.core.run_spec import forward_mode, infer_mode, train_config
from src.core.semantic_router import SemanticRouter
from src.core.toy_model import rtn_quantize, weight_only
from src.lsiquant_semantic import LsiQuantSemantic


class StubOperation:
    def __init__(self, outcome):
        self.outcome = outcome
        self.seen_context = None

    def execute(self, action, params, context):
        self.seen_context = context
        if isinstance(self.outcome, Exception):
            raise self.outcome
        return dict(self.outcome)

    def get_capabilities(self):
        return {"actions": ["run"]}


def test_partial_defaults_merge_over_builtins(tmp_path):
    (tmp_path / "defaults.json").write_text(json.dumps({"training": {"epochs": 5}}))
    defaults = load_defaults(tmp_path)
    assert defaults["training"]["epochs"] == 5
    assert defaults["training"]["learning_rate"] == BUILTIN_DEFAULTS["training"]["learning_rate"]
    assert defaults["lsi"] == BUILTIN_DEFAULTS["lsi"]


def test_shipped_config_validates():
    defaults = load_defaults()
    assert defaults["lsi"]["max_trainable_fraction"] == 0.05
    variants = {v["name"]: v for v in load_ablations()["variants"]}
    assert variants["rtn"]["train_lwc"] is False
    assert "train_lwc" not in variants["no_smooth"]
    names = [v["name"] for v in load_ablations()["variants"]]
    assert names[0] == "full" and "no_lsi" in names
    assert "quantize_calibrate_completed" in load_workflows()["workflow_hints"]


def test_schema_violations_name_the_path(tmp_path):
    (tmp_path / "defaults.json").write_text(json.dumps({"training": {"epochs": 0}}))
    with pytest.raises(ConfigurationError, match="training/epochs"):
        load_defaults(tmp_path)
    with pytest.raises(ConfigurationError):
        validate_config("ablations.json", {"variants": [{"name": "x", "colour": "red"}]})
    (tmp_path / "workflows.json").write_text("{not json")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_workflows(tmp_path)


def test_missing_files_fall_back_to_builtins(tmp_path):
    assert load_defaults(tmp_path) == BUILTIN_DEFAULTS
    assert [v["name"] for v in load_ablations(tmp_path)["variants"]] == ["full", "no_lsi"]
    assert load_workflows(tmp_path) == {"workflow_hints": {}}


def test_forward_mode_overrides():
    defaults = load_defaults()
    assert forward_mode({}, defaults).label == "w4a16"
    assert forward_mode({"setting": "w4a16", "bits": 3, "group_size": 16}, defaults).label == "w3a16g16"
    assert forward_mode({"setting": "w4a16g64", "act_bits": 6}, defaults).label == "w4a6g64"
    with pytest.raises(ConfigurationError):
        forward_mode({"setting": "fp", "act_bits": 6}, defaults)

    assert not forward_mode({"setting": "w4a4"}, defaults).act_per_sequence
    per_seq = forward_mode({"setting": "w4a4", "act_per_sequence": True}, defaults)
    assert per_seq.act_per_sequence and per_seq.label == "w4a4"
    assert forward_mode({"setting": "w4a4", "bits": 3, "act_per_sequence": True},
                        defaults).act_per_sequence


def test_train_config_flag_combinations():
    defaults = load_defaults()
    with pytest.raises(ConfigurationError, match="group-size"):
        train_config({"square_n": 4}, defaults, weight_only(3))
    with pytest.raises(ConfigurationError):
        train_config({}, defaults, forward_mode({"setting": "fp"}, defaults))

    cfg = train_config({"square_n": 4, "lr": 1e-3, "no_lwc": True}, defaults, weight_only(3, 16))
    assert (cfg.square_n, cfg.learning_rate, cfg.train_lwc) == (4, 1e-3, False)
    assert cfg.epochs == defaults["training"]["epochs"]

    assert (cfg.smooth_lr, cfg.clip_lr) == (defaults["training"]["smooth_lr"],
                                           defaults["training"]["clip_lr"])
    rates = train_config({"smooth_lr": 3e-3, "clip_lr": 1e-1}, defaults, weight_only(3))
    assert (rates.smooth_lr, rates.clip_lr) == (3e-3, 1e-1)
    assert rates.learning_rate == defaults["training"]["learning_rate"]

    tuned = train_config({}, defaults, weight_only(3), finetune=True)
    assert tuned.finetune_last == defaults["finetune"]["last"]
    assert tuned.epochs == defaults["finetune"]["epochs"]


def test_infer_mode(tiny_model):
    assert infer_mode(tiny_model).is_fp
    mode = infer_mode(rtn_quantize(tiny_model, weight_only(3, 16)), act_bits=6)
    assert (mode.weight_bits, mode.group_size, mode.act_bits) == (3, 16, 6)


def test_router_unknown_operation(tmp_path):
    router = SemanticRouter(tmp_path)
    router.register_operation("quantize", StubOperation({"success": True}))
    result = router.route("compress", "run", {})
    assert result["success"] is False
    assert result["exit_code"] == 2
    assert result["available_operations"] == ["quantize"]


def test_router_turns_errors_into_results(tmp_path):
    router = SemanticRouter(tmp_path)
    router.register_operation("evaluate", StubOperation(ParseError("bad token", offset=7, line=2)))
    result = router.route("evaluate", "model", {})
    assert result["success"] is False
    assert result["exit_code"] == 3
    assert (result["offset"], result["line"]) == (7, 2)
    assert result["error_type"] == "ParseError"
    assert result["hint"]
    assert result["_metadata"] == {"operation": "evaluate", "action": "model"}


def test_router_workflow_hints_and_context(tmp_path):
    hints = {"workflow_hints": {"quantize_calibrate_completed": {
        "message": "done", "next_steps": [{"operation": "export", "action": "packed", "hint": "pack it"}]}}}
    (tmp_path / "workflows.json").write_text(json.dumps(hints))
    router = SemanticRouter(tmp_path)
    quantize = StubOperation({"success": True, "model_path": "q.lsq"})
    router.register_operation("quantize", quantize)

    result = router.route("quantize", "calibrate", {})
    assert result["workflow"]["message"] == "done"
    assert result["workflow"]["suggested_next"][0]["command"] == "export(action='packed')"
    router.route("quantize", "calibrate", {})
    assert quantize.seen_context == {"last_model": "q.lsq"}

    assert "workflow" not in router.route("quantize", "rtn", {})


def test_facade_registers_every_operation(tmp_path):
    semantic = LsiQuantSemantic(tmp_path)
    assert set(semantic.get_capabilities()) == {
        "generate", "quantize", "evaluate", "finetune", "export", "ablate"}
    result = semantic.execute("generate", "bogus", {})
    assert result["success"] is False and result["exit_code"] == 2
    assert result["available_actions"] == ["model"]
    missing = semantic.execute("quantize", "calibrate", {"model": None})
    assert missing["exit_code"] == 2
