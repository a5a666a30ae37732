"""
Run settings shared by the command line and the tool server.

Turns loose parameter dictionaries (flags or tool arguments) plus the
configured defaults into a ForwardMode and a TrainConfig, validating
flag combinations before any computation starts.
"""

import logging
from dataclasses import replace
from typing import Any, Dict, Optional

from .calib_trainer import MODE_CALIBRATE, MODE_FINETUNE, TrainConfig
from .errors import ConfigurationError
from .quantizer import GROUP
from .toy_model import STATE_QUANTIZED, ForwardMode, LayerGraph, parse_setting

logger = logging.getLogger(__name__)


def forward_mode(params: Dict[str, Any], defaults: Dict[str, Any]) -> ForwardMode:
    """
    Resolve --setting and the --bits/--act-bits/--group-size and
    --act-per-sequence overrides.

    The setting string fills every field; explicit flags then replace
    single fields.
    """
    setting = params.get("setting") or defaults["quantization"]["setting"]
    mode = parse_setting(setting)
    bits = params.get("bits")
    act_bits = params.get("act_bits")
    group_size = params.get("group_size")
    if params.get("act_per_sequence"):
        mode = replace(mode, act_per_sequence=True)
    if bits is None and act_bits is None and group_size is None:
        return mode
    if mode.is_fp and bits is None:
        raise ConfigurationError("--act-bits and --group-size need weight bits",
                                 hint="Add --bits or use a w<bits>a<bits> setting")
    text = (f"w{bits if bits is not None else mode.weight_bits}"
            f"a{act_bits if act_bits is not None else (mode.act_bits or 16)}")
    group = group_size if group_size is not None else mode.group_size
    if group:
        text += f"g{group}"
    return replace(parse_setting(text), act_per_sequence=mode.act_per_sequence)


def infer_mode(model: LayerGraph, act_bits: Optional[int] = None,
               act_per_sequence: bool = False) -> ForwardMode:
    """Weight setting a folded model was quantized with; fp for float models."""
    configs = {(lin.weight.config.bits, lin.weight.config.granularity, lin.weight.config.group_size)
               for block in model.blocks for lin in block.linears().values()
               if lin.state == STATE_QUANTIZED}
    if not configs:
        return ForwardMode(act_per_sequence=act_per_sequence)
    if len(configs) > 1:
        raise ConfigurationError(f"model mixes quantization settings: {sorted(configs)}")
    bits, granularity, group_size = configs.pop()
    return ForwardMode(weight_bits=bits, act_bits=act_bits,
                       group_size=group_size if granularity == GROUP else 0,
                       act_per_sequence=act_per_sequence)


def train_config(params: Dict[str, Any], defaults: Dict[str, Any], mode: ForwardMode,
                 finetune: bool = False) -> TrainConfig:
    """
    Build the TrainConfig for a run.

    Raises:
        ConfigurationError: invalid combination, e.g. a square block without groups
    """
    training, lsi = defaults["training"], defaults["lsi"]

    def pick(key: str, section: Dict[str, Any], name: Optional[str] = None):
        value = params.get(key)
        return section[name or key] if value is None else value

    square_n = pick("square_n", lsi)
    if square_n and not mode.group_size:
        raise ConfigurationError("--square-n > 0 requires --group-size > 0",
                                 hint="The square block only applies to group-wise quantization")
    if mode.is_fp:
        raise ConfigurationError("calibration needs a weight setting, not fp")

    epochs = params.get("epochs")
    if epochs is None:
        epochs = defaults["finetune"]["epochs"] if finetune else training["epochs"]
    finetune_last = 0
    if finetune:
        finetune_last = params.get("finetune_last")
        if finetune_last is None:
            finetune_last = defaults["finetune"]["last"]

    return TrainConfig(
        learning_rate=pick("lr", training, "learning_rate"),
        smooth_lr=pick("smooth_lr", training),
        clip_lr=pick("clip_lr", training),
        weight_decay=pick("weight_decay", training),
        epochs=epochs,
        batch_size=pick("batch_size", training),
        seed=pick("seed", training),
        mode=MODE_FINETUNE if finetune else MODE_CALIBRATE,
        finetune_last=finetune_last,
        ste_clip=pick("ste_clip", training),
        propagate_errors=pick("propagate_errors", training),
        train_lsi=not params.get("no_lsi", False),
        train_smooth=not params.get("no_smooth", False),
        train_lwc=not params.get("no_lwc", False),
        square_n=square_n,
        init=pick("init", training),
        max_trainable_fraction=lsi["max_trainable_fraction"],
        divergence_factor=lsi["divergence_factor"],
    )
