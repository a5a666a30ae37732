#!/usr/bin/env python3
"""lsiquant MCP Server

Exposes the quantization pipeline as MCP tools. Each tool takes an
`action` plus the same parameters as the matching command line
command and returns the result document as JSON text.

Usage:
    lsiquant-server [config_dir]
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Any, List, Optional

sys.path.insert(0, str(Path(__file__).parent))

from mcp.server.fastmcp import FastMCP
from src.lsiquant_semantic import LsiQuantSemantic

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr
)
logger = logging.getLogger('lsiquant')

mcp = FastMCP("lsiquant")

if len(sys.argv) > 1:
    config_dir = Path(sys.argv[1]).expanduser().resolve()
elif os.environ.get("LSIQUANT_CONFIG_DIR"):
    config_dir = Path(os.environ["LSIQUANT_CONFIG_DIR"]).expanduser().resolve()
else:
    config_dir = None

semantic = LsiQuantSemantic(config_dir)


def format_result(result: Dict[str, Any]) -> str:
    """Result document as stable JSON text."""
    return json.dumps(result, indent=2, sort_keys=True)


def _params(local_vars: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in local_vars.items() if v is not None and k != 'action'}


@mcp.tool()
def generate(
    action: str = "model",
    output_dir: str = ".",
    seed: Optional[int] = None,
    n_layers: Optional[int] = None,
    width: Optional[int] = None,
    n_heads: Optional[int] = None,
    vocab: Optional[int] = None,
    seq_len: Optional[int] = None,
    outlier_fraction: Optional[float] = None,
    calib_samples: Optional[int] = None,
    eval_samples: Optional[int] = None,
    fit_readout: bool = True
) -> str:
    """Generate a seeded synthetic decoder model plus calibration, eval and held-out tokens.

    Actions:
    - model: write model.lsq, calib.txt, eval.txt and heldout.txt into output_dir
    """
    return format_result(semantic.execute("generate", action, _params(locals())))


@mcp.tool()
def quantize(
    action: str,
    model: Optional[str] = None,
    calib: Optional[str] = None,
    output: Optional[str] = None,
    setting: Optional[str] = None,
    bits: Optional[int] = None,
    act_bits: Optional[int] = None,
    group_size: Optional[int] = None,
    act_per_sequence: bool = False,
    lr: Optional[float] = None,
    smooth_lr: Optional[float] = None,
    clip_lr: Optional[float] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    no_lsi: bool = False,
    no_smooth: bool = False,
    no_lwc: bool = False,
    square_n: Optional[int] = None
) -> str:
    """Quantize a float model layer by layer and fold the result.

    Actions:
    - calibrate: train singular value increments, smoothing and clipping per block
    - rtn: round-to-nearest baseline
    """
    return format_result(semantic.execute("quantize", action, _params(locals())))


@mcp.tool()
def evaluate(
    action: str = "model",
    model: Optional[str] = None,
    data: Optional[str] = None,
    reference: Optional[str] = None,
    setting: Optional[str] = None,
    act_per_sequence: bool = False
) -> str:
    """Perplexity of a model, plus end-to-end and per-layer MSE against a reference.

    Actions:
    - model: evaluate at the given setting (inferred from a quantized model)
    """
    return format_result(semantic.execute("evaluate", action, _params(locals())))


@mcp.tool()
def finetune(
    action: str = "last_layers",
    model: Optional[str] = None,
    reference: Optional[str] = None,
    calib: Optional[str] = None,
    heldout: Optional[str] = None,
    output: Optional[str] = None,
    finetune_last: Optional[int] = None,
    epochs: Optional[int] = None,
    lr: Optional[float] = None
) -> str:
    """Retrain the last layers of a quantized model on target data.

    Actions:
    - last_layers: earlier layers keep their codes
    """
    return format_result(semantic.execute("finetune", action, _params(locals())))


@mcp.tool()
def export(
    action: str = "packed",
    model: Optional[str] = None,
    output: Optional[str] = None,
    f32_scales: bool = False
) -> str:
    """Write packed k-bit codes of a quantized model."""
    return format_result(semantic.execute("export", action, _params(locals())))


@mcp.tool()
def ablate(
    action: str = "run",
    model: Optional[str] = None,
    calib: Optional[str] = None,
    setting: Optional[str] = None,
    epochs: Optional[int] = None,
    variants: Optional[List[str]] = None
) -> str:
    """Loss table over pipeline variants (full, no LSI, no smoothing, ...).

    Actions:
    - run: calibrate once per variant
    - variants: list the configured variants
    """
    return format_result(semantic.execute("ablate", action, _params(locals())))


def main():
    """Run the MCP server."""
    mcp.run()


if __name__ == "__main__":
    main()
