#!/usr/bin/env python3
"""lsiquant command line

Post-training quantization of toy decoder models with learnable
singular value increments, equivalent smoothing and weight clipping.

Every command prints one JSON document on stdout; logs and the
calibration trace go to stderr.

Usage:
    lsiquant gen --output-dir work --seed 0
    lsiquant quantize --model work/model.lsq --calib work/calib.txt --setting w3a16
    lsiquant eval --model work/model_w3a16.lsq --data work/eval.txt --reference work/model.lsq
    lsiquant finetune --model work/model_w3a16.lsq --reference work/model.lsq --calib work/heldout.txt --finetune-last 2
    lsiquant export --model work/model_w3a16.lsq --f32-scales
    lsiquant ablate --model work/model.lsq --calib work/calib.txt --setting w2a16g16

Exit codes: 0 success, 2 usage or configuration error, 3 data or parse
error, 4 training divergence.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent))

from src.core.errors import LsiQuantError
from src.lsiquant_semantic import LsiQuantSemantic

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

COMMANDS = {
    "gen": ("generate", "model"),
    "quantize": ("quantize", "calibrate"),
    "eval": ("evaluate", "model"),
    "finetune": ("finetune", "last_layers"),
    "export": ("export", "packed"),
    "ablate": ("ablate", "run"),
}


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="Warnings only")
    parser.add_argument("--config-dir", type=Path, help="Directory holding defaults.json and friends")


def _quant_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--setting", help="w<bits>a<bits>[g<group>], e.g. w4a16g128, or fp")
    parser.add_argument("--bits", type=int, help="Weight bits (2-8)")
    parser.add_argument("--act-bits", type=int, help="Activation bits (2-16, above 8 is fp)")
    parser.add_argument("--group-size", type=int, help="Group size, 0 for per-channel")
    parser.add_argument("--act-per-sequence", action="store_true",
                        help="One activation scale per sequence instead of per tensor")


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, help="Learning rate of increments and square blocks")
    parser.add_argument("--smooth-lr", type=float, help="Learning rate of the smoothing scales")
    parser.add_argument("--clip-lr", type=float, help="Learning rate of the clipping logits")
    parser.add_argument("--epochs", type=int, help="Epochs per layer")
    parser.add_argument("--batch-size", type=int, help="Sequences per step")
    parser.add_argument("--weight-decay", type=float, help="Decoupled weight decay")
    parser.add_argument("--seed", type=int, help="Training seed")
    parser.add_argument("--no-lsi", action="store_true", help="Freeze singular value increments")
    parser.add_argument("--no-smooth", action="store_true", help="Freeze channel smoothing and query/key scaling")
    parser.add_argument("--no-lwc", action="store_true", help="Freeze weight clipping")
    parser.add_argument("--square-n", type=int, help="Square block dimension (group-wise only)")
    parser.add_argument("--init", choices=["zeros", "random"], help="Increment initialization")
    parser.add_argument("--no-propagate", action="store_true",
                        help="Calibrate each layer on full-precision inputs")
    parser.add_argument("--no-ste-clip", action="store_true",
                        help="Pass gradients through clamped codes too")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsiquant", description=__doc__.split("\n")[2])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic model and token data")
    _common(gen)
    gen.add_argument("--output-dir", default=".", help="Where to write the files")
    gen.add_argument("--seed", type=int, help="Generator seed")
    gen.add_argument("--layers", dest="n_layers", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--heads", dest="n_heads", type=int)
    gen.add_argument("--vocab", type=int)
    gen.add_argument("--seq-len", type=int)
    gen.add_argument("--outlier-fraction", type=float)
    gen.add_argument("--outlier-scale", type=float)
    gen.add_argument("--calib-samples", type=int)
    gen.add_argument("--eval-samples", type=int)
    gen.add_argument("--heldout-chain", type=int, help="Markov source of the held-out set")
    gen.add_argument("--no-readout", action="store_true", help="Keep the random readout")

    quantize = sub.add_parser("quantize", help="Calibrate and fold a float model")
    _common(quantize)
    quantize.add_argument("--model", required=True)
    quantize.add_argument("--calib", required=True)
    quantize.add_argument("--calib-format", choices=["tokens", "activations"], default="tokens")
    quantize.add_argument("--output")
    quantize.add_argument("--rtn", action="store_true", help="Round-to-nearest baseline only")
    quantize.add_argument("--no-trace", action="store_true", help="Leave epoch traces out of the report")
    _quant_flags(quantize)
    _train_flags(quantize)

    evaluate = sub.add_parser("eval", help="Perplexity and losses against a reference")
    _common(evaluate)
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--reference", help="Full-precision model for MSE metrics")
    _quant_flags(evaluate)

    finetune = sub.add_parser("finetune", help="Retrain the last layers of a quantized model")
    _common(finetune)
    finetune.add_argument("--model", required=True)
    finetune.add_argument("--reference", required=True)
    finetune.add_argument("--calib", required=True, help="Target data")
    finetune.add_argument("--calib-format", choices=["tokens", "activations"], default="tokens")
    finetune.add_argument("--heldout", help="Second distribution, reported only")
    finetune.add_argument("--output")
    finetune.add_argument("--finetune-last", type=int, help="Number of trailing layers")
    _quant_flags(finetune)
    _train_flags(finetune)

    export = sub.add_parser("export", help="Write packed codes of a quantized model")
    _common(export)
    export.add_argument("--model", required=True)
    export.add_argument("--output")
    export.add_argument("--f32-scales", action="store_true")

    ablate = sub.add_parser("ablate", help="Loss table over pipeline variants")
    _common(ablate)
    ablate.add_argument("--model", required=True)
    ablate.add_argument("--calib", required=True)
    ablate.add_argument("--calib-format", choices=["tokens", "activations"], default="tokens")
    ablate.add_argument("--variants", help="Comma-separated variant names")
    _quant_flags(ablate)
    _train_flags(ablate)
    return parser


def to_params(args: argparse.Namespace) -> Dict[str, Any]:
    """Namespace -> operation parameters (None means 'use the default')."""
    params = {k: v for k, v in vars(args).items()
              if k not in ("command", "verbose", "quiet", "config_dir", "rtn")}
    if params.pop("no_propagate", False):
        params["propagate_errors"] = False
    if params.pop("no_ste_clip", False):
        params["ste_clip"] = False
    if params.pop("no_readout", False):
        params["fit_readout"] = False
    if params.pop("no_trace", False):
        params["trace"] = False
    if isinstance(params.get("variants"), str):
        params["variants"] = [v.strip() for v in params["variants"].split(",") if v.strip()]
    return params


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    operation, action = COMMANDS[args.command]
    if args.command == "quantize" and args.rtn:
        action = "rtn"
    try:
        semantic = LsiQuantSemantic(args.config_dir)
        result = semantic.execute(operation, action, to_params(args))
    except LsiQuantError as e:
        # Config errors raised before routing
        result = e.to_result()

    print(json.dumps(result, indent=2, sort_keys=True))
    return 0 if result.get("success") else int(result.get("exit_code", 2))


if __name__ == "__main__":
    sys.exit(main())
