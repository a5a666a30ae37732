"""
Layerwise calibration.

Each calibration unit (a single linear layer or a whole decoder block)
owns frozen weights and SVD factors and exposes a quantized forward,
an analytic backward over its trainable parameters and a fold that
bakes the trained parameters into quantized weights. The loop here
minimizes the mean squared error between the unit's full-precision
output and its quantized output with Adam, keeping the best epoch.

Parameter names:

    increment, square_block    singular value increment I' and block K
    log_s_c, delta             channel smoothing of the unit input
    gamma, beta                clipping logits (per quantization group)
    log_s_a                    attention query/key scale

Block units prefix them with the linear or smoothing site they belong
to ("q.increment", "qkv.log_s_c", "attn.log_s_a").
"""

import logging
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DivergenceError, LsiQuantError, TrainingError
from .lsi_core import (INIT_ZEROS, LsiParams, capture, check_budget, default_square_n,
                       grid_distance, reconstruct, trainable_fraction)
from .ops import (ActQuant, CausalAttention, Ctx, Gelu, LayerNorm,
                  QuantLinear, RoundingTape, effective_bias, effective_weight,
                  lsi_backward)
from .quantizer import (CLIP_INIT_LOGIT, ClipLogits, QuantConfig, QuantizedTensor,
                        clipped_range, dequantize, group_view, quantize, scale_zero,
                        ungroup)
from .smoothing import SmoothParams, fold_scale_into_norm
from .tensor_core import Matrix, frobenius_mse, seeded_rng
from .toy_model import (LINEARS, Block, CalibSet, ForwardMode, LayerGraph, Linear,
                        block_forward, dequantized_block, embed, final_hidden)

logger = logging.getLogger(__name__)
trace_logger = logging.getLogger("lsiquant.trace")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# sigmoid(40.0) == 1.0 in float64: clipping switched off.
NEUTRAL_CLIP_LOGIT = 40.0

MODE_CALIBRATE = "calibrate_all"
MODE_FINETUNE = "finetune_last"

LSI_PARAMS = ("increment", "square_block")
SMOOTH_PARAMS = ("log_s_c", "delta", "log_s_a")
CLIP_PARAMS = ("gamma", "beta")


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimizer and loop settings for calibration.

    learning_rate drives the singular value increments and square
    blocks; smoothing and clipping logits have their own rates.
    """

    learning_rate: float = 2e-4
    smooth_lr: float = 1e-2
    clip_lr: float = 5e-2
    weight_decay: float = 0.0
    epochs: int = 2
    batch_size: int = 4
    seed: int = 0
    mode: str = MODE_CALIBRATE
    finetune_last: int = 0
    ste_clip: bool = True
    propagate_errors: bool = True
    train_lsi: bool = True
    train_smooth: bool = True
    train_lwc: bool = True
    square_n: Optional[int] = None
    init: str = INIT_ZEROS
    max_trainable_fraction: float = 0.05
    divergence_factor: float = 10.0

    def __post_init__(self):
        for name in ("learning_rate", "smooth_lr", "clip_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in (MODE_CALIBRATE, MODE_FINETUNE):
            raise ConfigurationError(f"Unknown training mode: {self.mode}")
        if self.mode == MODE_FINETUNE and self.finetune_last < 1:
            raise ConfigurationError(
                "finetune mode needs at least one layer",
                hint="Pass --finetune-last L with L >= 1")

    def learning_rate_for(self, name: str) -> float:
        kind = _param_kind(name)
        if kind in SMOOTH_PARAMS:
            return self.smooth_lr
        if kind in CLIP_PARAMS:
            return self.clip_lr
        return self.learning_rate


@dataclass
class ParamGroup:
    """Trainable tensors with Adam moment buffers and per-tensor step counters."""

    values: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def create(cls, values: Dict[str, np.ndarray]) -> "ParamGroup":
        values = {k: np.array(val, dtype=np.float64) for k, val in values.items()}
        return cls(values=values,
                   m={k: np.zeros_like(val) for k, val in values.items()},
                   v={k: np.zeros_like(val) for k, val in values.items()},
                   steps={k: 0 for k in values})


def adam_step(params: ParamGroup, grads: Dict[str, np.ndarray], cfg: TrainConfig) -> ParamGroup:
    """
    One AdamW update of the tensors named in grads.

    Raises:
        TrainingError: a gradient is not finite (names the parameter)
    """
    values, m, v, steps = dict(params.values), dict(params.m), dict(params.v), dict(params.steps)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", parameter=name)
        lr = cfg.learning_rate_for(name)
        t = steps[name] + 1
        m[name] = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m[name] / (1.0 - ADAM_BETA1 ** t)
        v_hat = v[name] / (1.0 - ADAM_BETA2 ** t)
        p = values[name]
        if cfg.weight_decay > 0:
            p = p - lr * cfg.weight_decay * p
        values[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        steps[name] = t
    return ParamGroup(values=values, m=m, v=v, steps=steps)


def ste_backward(upstream_grad: Matrix, w: Matrix, cfg: QuantConfig, ste_clip: bool = True) -> Matrix:
    """
    Straight-through gradient of fake_quantize w.r.t. its input.

    Rounding passes the gradient unchanged; with ste_clip, entries whose
    pre-clamp code falls outside [0, 2^k - 1] get zero. The qparams are
    held fixed here; the calibration units also differentiate them.
    """
    if upstream_grad.shape != w.shape:
        raise LsiQuantError(f"gradient shape {upstream_grad.shape} != weight shape {w.shape}")
    if not ste_clip:
        return upstream_grad
    groups = group_view(w, cfg)
    lo, hi, *_ = clipped_range(groups, cfg.clip)
    s, z, _ = scale_zero(lo, hi, cfg.qmax)
    pre = np.rint(groups / s[:, None]) + z[:, None]
    mask = ((pre >= 0) & (pre <= cfg.qmax)).astype(np.float64)
    return upstream_grad * ungroup(mask, w.shape, cfg)


def _param_kind(name: str) -> str:
    return name.rsplit(".", 1)[-1]


class CalibrationUnit:
    """Shared loss/gradient plumbing; subclasses supply forward, backward and fold."""

    seq_len: int = 1
    ste_clip: bool = True

    def init_params(self, cfg: TrainConfig) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def neutral_params(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def fp_forward(self, x: Matrix) -> Matrix:
        raise NotImplementedError

    def quantized_forward(self, params, x, tape=None):
        raise NotImplementedError

    def backward(self, ctx, params, grad) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def lsi_states(self, params) -> Dict[str, LsiParams]:
        raise NotImplementedError

    def trainable_names(self, params: Dict[str, np.ndarray], cfg: TrainConfig) -> List[str]:
        names = []
        for name in params:
            kind = _param_kind(name)
            if kind in LSI_PARAMS and cfg.train_lsi:
                names.append(name)
            elif kind in SMOOTH_PARAMS and cfg.train_smooth:
                names.append(name)
            elif kind in CLIP_PARAMS and cfg.train_lwc:
                names.append(name)
        return names

    def loss(self, params, x: Matrix, target: Matrix, tape: Optional[RoundingTape] = None) -> float:
        out, _ = self.quantized_forward(params, x, tape)
        return frobenius_mse(out, target)

    def loss_and_grads(self, params, x: Matrix, target: Matrix,
                       tape: Optional[RoundingTape] = None) -> Tuple[float, Dict[str, np.ndarray]]:
        out, ctx = self.quantized_forward(params, x, tape)
        diff = out - target
        loss = float(np.mean(diff * diff))
        grads = self.backward(ctx, params, 2.0 * diff / diff.size)
        return loss, grads

    def increment_norm(self, params) -> float:
        total = sum(float(np.sum(v * v)) for k, v in params.items()
                    if _param_kind(k) in LSI_PARAMS)
        return float(np.sqrt(total))

    def lsi_fraction(self) -> float:
        states = self.lsi_states(self.neutral_params())
        return max(trainable_fraction(p) for p in states.values())

    def check_budget(self, max_fraction: float) -> float:
        return max(check_budget(p, max_fraction) for p in self.lsi_states(self.neutral_params()).values())

    def square_ns(self) -> Dict[str, int]:
        return {k: p.square_n for k, p in self.lsi_states(self.neutral_params()).items()}


def _clip_params(prefix: str, cfg: QuantConfig, shape, logit: float) -> Dict[str, np.ndarray]:
    n = cfg.n_groups(shape)
    return {f"{prefix}gamma": np.full(n, logit), f"{prefix}beta": np.full(n, logit)}


def _with_clip(cfg: QuantConfig, params, prefix: str) -> QuantConfig:
    return cfg.with_clip(ClipLogits(gamma=params[f"{prefix}gamma"], beta=params[f"{prefix}beta"]))


def _lsi_values(base: LsiParams, params, prefix: str) -> LsiParams:
    block = params.get(f"{prefix}square_block")
    return base.with_values(params[f"{prefix}increment"], block)


class LinearUnit(CalibrationUnit):
    """
    A single linear layer y = x W + b with input smoothing, LSI and LWC.

    Args:
        weight, bias: Full-precision layer
        cfg: Weight quantization config (its clip is ignored)
        act_bits: Activation bits, None or > 8 for weight-only
        seq_len: Rows per sample (batches are drawn in whole samples)
        square_n: Square block dimension
        increment_dims: Train only the leading singular values
        act_per_sequence: One activation scale per sample instead of per tensor
    """

    def __init__(self, weight: Matrix, bias: np.ndarray, cfg: QuantConfig,
                 act_bits: Optional[int] = None, seq_len: int = 1, square_n: int = 0,
                 increment_dims: Optional[int] = None, init: str = INIT_ZEROS,
                 rng=None, ste_clip: bool = True, act_per_sequence: bool = False):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.cfg = cfg.with_clip(None)
        self.cfg.validate_for(self.weight.shape)
        self.act_bits = act_bits
        self.seq_len = seq_len
        self.act_seq_len = seq_len if act_per_sequence else None
        self.ste_clip = ste_clip
        self.lsi = capture(self.weight, square_n=square_n, init=init, rng=rng)
        self.increment_dims = increment_dims

    def _params(self, clip_logit: float, increment: np.ndarray) -> Dict[str, np.ndarray]:
        n_in = self.weight.shape[0]
        params = {"increment": increment.copy()}
        if self.lsi.square_block is not None:
            params["square_block"] = np.zeros_like(self.lsi.square_block)
        params["log_s_c"] = np.zeros(n_in)
        params["delta"] = np.zeros(n_in)
        params.update(_clip_params("", self.cfg, self.weight.shape, clip_logit))
        return params

    def init_params(self, cfg: TrainConfig) -> Dict[str, np.ndarray]:
        logit = CLIP_INIT_LOGIT if cfg.train_lwc else NEUTRAL_CLIP_LOGIT
        increment = self.lsi.increment if cfg.train_lsi else np.zeros(self.lsi.rank_dim)
        return self._params(logit, increment)

    def neutral_params(self) -> Dict[str, np.ndarray]:
        return self._params(NEUTRAL_CLIP_LOGIT, np.zeros(self.lsi.rank_dim))

    def lsi_states(self, params) -> Dict[str, LsiParams]:
        return {"linear": _lsi_values(self.lsi, params, "")}

    def fp_forward(self, x: Matrix) -> Matrix:
        return x @ self.weight + self.bias

    def quantized_forward(self, params, x, tape=None):
        ctx = Ctx()
        s = np.exp(params["log_s_c"])
        delta = params["delta"]
        x_s = (x - delta) / s
        ctx.aq = Ctx()
        x_q = ActQuant.forward(ctx.aq, x_s, self.act_bits, self.act_seq_len, tape, self.ste_clip)
        ctx.lin = Ctx()
        w_prime = reconstruct(_lsi_values(self.lsi, params, ""))
        y = QuantLinear.forward(ctx.lin, x_q, w_prime, self.bias, _with_clip(self.cfg, params, ""),
                                s_in=s, delta_in=delta, tape=tape, ste_clip=self.ste_clip)
        ctx.s, ctx.x_s = s, x_s
        return y, ctx

    def backward(self, ctx, params, grad) -> Dict[str, np.ndarray]:
        g = QuantLinear.backward(ctx.lin, grad)
        g_inc, g_block = lsi_backward(_lsi_values(self.lsi, params, ""), g["w"])
        if self.increment_dims is not None:
            g_inc[self.increment_dims:] = 0.0
        g_x = ActQuant.backward(ctx.aq, g["x"])
        g_s = g["s_in"] - np.sum(g_x * ctx.x_s, axis=0) / ctx.s
        grads = {
            "increment": g_inc,
            "log_s_c": g_s * ctx.s,
            "delta": g["delta_in"] - np.sum(g_x, axis=0) / ctx.s,
            "gamma": g["gamma"],
            "beta": g["beta"],
        }
        if g_block is not None:
            grads["square_block"] = g_block
        return grads

    def fold(self, params) -> Tuple[QuantizedTensor, np.ndarray, SmoothParams]:
        """
        Returns:
            (codes of diag(s_c) W', bias + delta W', input smoothing)
        """
        s = np.exp(params["log_s_c"])
        w_prime = reconstruct(_lsi_values(self.lsi, params, ""))
        q = quantize(effective_weight(w_prime, s, None), _with_clip(self.cfg, params, ""))
        b = effective_bias(self.bias, w_prime, params["delta"], None, None)
        return q, b, SmoothParams(s_c=s, delta=params["delta"].copy())

    def folded_forward(self, folded, x: Matrix) -> Matrix:
        """Inference path of a folded layer: smooth, quantize activations, plain matmul."""
        q, b, smooth = folded
        x_s = (x - smooth.delta) / smooth.s_c
        x_q = ActQuant.forward(Ctx(), x_s, self.act_bits, self.act_seq_len)
        return x_q @ dequantize(q) + b

    def grid_distance(self, params) -> float:
        s = np.exp(params["log_s_c"])
        w_prime = reconstruct(_lsi_values(self.lsi, params, ""))
        return grid_distance(effective_weight(w_prime, s, None), _with_clip(self.cfg, params, ""))


class BlockUnit(CalibrationUnit):
    """
    A pre-norm decoder block.

    Smoothing sites:
        qkv   input of q/k/v, folded into the first norm
        out   input of o, folded into the v projection
        up    input of up, folded into the second norm
    plus the query/key scale s_a, folded into the q and k projections.
    Every linear carries its own LSI and clipping parameters. Activations
    are quantized at the linear inputs only; q and k reach the softmax
    unquantized.
    """

    SITES = ("qkv", "out", "up")

    def __init__(self, block: Block, cfg: QuantConfig, n_heads: int, seq_len: int,
                 act_bits: Optional[int] = None, square_n: Optional[int] = None,
                 max_fraction: Optional[float] = None, init: str = INIT_ZEROS,
                 rng=None, ste_clip: bool = True, act_per_sequence: bool = False):
        self.block = dequantized_block(block)
        self.cfg = cfg.with_clip(None)
        self.n_heads = n_heads
        self.seq_len = seq_len
        self.act_seq_len = seq_len if act_per_sequence else None
        self.act_bits = act_bits
        self.ste_clip = ste_clip
        self.width = self.block.ln1_gain.shape[0]
        self.head_dim = self.width // n_heads
        self.lsi: Dict[str, LsiParams] = {}
        for name, lin in self.block.linears().items():
            self.cfg.validate_for(lin.shape)
            n = default_square_n(self.cfg, lin.shape, square_n, max_fraction)
            self.lsi[name] = capture(lin.weight, square_n=n, init=init, rng=rng)

    def _params(self, clip_logit: float, zero_increments: bool) -> Dict[str, np.ndarray]:
        params = {}
        for name, p in self.lsi.items():
            params[f"{name}.increment"] = np.zeros(p.rank_dim) if zero_increments else p.increment.copy()
            if p.square_block is not None:
                params[f"{name}.square_block"] = np.zeros_like(p.square_block)
            params.update(_clip_params(f"{name}.", self.cfg, p.shape, clip_logit))
        for site in self.SITES:
            params[f"{site}.log_s_c"] = np.zeros(self.width)
            params[f"{site}.delta"] = np.zeros(self.width)
        params["attn.log_s_a"] = np.zeros(self.head_dim)
        return params

    def init_params(self, cfg: TrainConfig) -> Dict[str, np.ndarray]:
        logit = CLIP_INIT_LOGIT if cfg.train_lwc else NEUTRAL_CLIP_LOGIT
        return self._params(logit, zero_increments=not cfg.train_lsi)

    def neutral_params(self) -> Dict[str, np.ndarray]:
        return self._params(NEUTRAL_CLIP_LOGIT, zero_increments=True)

    def lsi_states(self, params) -> Dict[str, LsiParams]:
        return {name: _lsi_values(p, params, f"{name}.") for name, p in self.lsi.items()}

    def fp_forward(self, x: Matrix) -> Matrix:
        return block_forward(self.block, x, ForwardMode(), self.n_heads, self.seq_len)

    def _scales(self, params):
        s = {site: np.exp(params[f"{site}.log_s_c"]) for site in self.SITES}
        d = {site: params[f"{site}.delta"] for site in self.SITES}
        s_a = np.tile(np.exp(params["attn.log_s_a"]), self.n_heads)
        return s, d, s_a

    def _smoothing(self, params) -> Dict[str, Dict[str, np.ndarray]]:
        """Input/output smoothing each linear absorbs."""
        s, d, s_a = self._scales(params)
        return {
            "q": dict(s_in=s["qkv"], delta_in=d["qkv"], c=1.0 / s_a),
            "k": dict(s_in=s["qkv"], delta_in=d["qkv"], c=s_a),
            "v": dict(s_in=s["qkv"], delta_in=d["qkv"], c=1.0 / s["out"], delta_out=d["out"]),
            "o": dict(s_in=s["out"], delta_in=d["out"]),
            "up": dict(s_in=s["up"], delta_in=d["up"]),
            "down": {},
        }

    def quantized_forward(self, params, x, tape=None):
        f = SimpleNamespace()
        bits, t, ste = self.act_bits, self.seq_len, self.ste_clip
        act_t = self.act_seq_len
        blk = self.block
        s, d, s_a = self._scales(params)
        w = {name: reconstruct(p) for name, p in self.lsi_states(params).items()}
        smoothing = self._smoothing(params)

        def lin(name, x_q):
            c = Ctx()
            setattr(f, name, c)
            cfg = _with_clip(self.cfg, params, f"{name}.")
            return QuantLinear.forward(c, x_q, w[name], getattr(blk, name).bias, cfg,
                                       tape=tape, ste_clip=ste, **smoothing[name])

        def aq(key, value):
            c = Ctx()
            setattr(f, key, c)
            return ActQuant.forward(c, value, bits, act_t, tape, ste)

        f.ln1 = Ctx()
        a1 = LayerNorm.forward(f.ln1, x, blk.ln1_gain, blk.ln1_bias)
        f.x1 = (a1 - d["qkv"]) / s["qkv"]
        x1q = aq("aq1", f.x1)
        q = lin("q", x1q)
        k = lin("k", x1q)
        v = lin("v", x1q)
        f.attn = Ctx()
        o = CausalAttention.forward(f.attn, q, k, v, self.n_heads, t)
        h = x + lin("o", aq("aqo", o))
        f.ln2 = Ctx()
        a2 = LayerNorm.forward(f.ln2, h, blk.ln2_gain, blk.ln2_bias)
        f.x3 = (a2 - d["up"]) / s["up"]
        u = lin("up", aq("aq3", f.x3))
        f.gelu = Ctx()
        g = Gelu.forward(f.gelu, u)
        out = h + lin("down", aq("aqg", g))
        f.s, f.s_a = s, s_a
        return out, f

    def backward(self, f, params, grad) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        states = self.lsi_states(params)
        s, s_a = f.s, f.s_a

        def collect(name, g):
            g_inc, g_block = lsi_backward(states[name], g["w"])
            grads[f"{name}.increment"] = g_inc
            if g_block is not None:
                grads[f"{name}.square_block"] = g_block
            grads[f"{name}.gamma"] = g["gamma"]
            grads[f"{name}.beta"] = g["beta"]
            return g

        g_h = grad.copy()
        gd = collect("down", QuantLinear.backward(f.down, grad))
        g_u = Gelu.backward(f.gelu, ActQuant.backward(f.aqg, gd["x"]))
        gu = collect("up", QuantLinear.backward(f.up, g_u))
        g_x3 = ActQuant.backward(f.aq3, gu["x"])
        g_s3 = gu["s_in"] - np.sum(g_x3 * f.x3, axis=0) / s["up"]
        g_d3 = gu["delta_in"] - np.sum(g_x3, axis=0) / s["up"]
        g_h += LayerNorm.backward(f.ln2, g_x3 / s["up"])

        go = collect("o", QuantLinear.backward(f.o, g_h))
        g_q, g_k, g_v = CausalAttention.backward(f.attn, ActQuant.backward(f.aqo, go["x"]))
        gq = collect("q", QuantLinear.backward(f.q, g_q))
        gk = collect("k", QuantLinear.backward(f.k, g_k))
        gv = collect("v", QuantLinear.backward(f.v, g_v))

        g_s_a = -gq["c"] / (s_a * s_a) + gk["c"]
        g_s2 = go["s_in"] - gv["c"] / (s["out"] * s["out"])
        g_d2 = go["delta_in"] + gv["delta_out"]

        g_x1 = ActQuant.backward(f.aq1, gq["x"] + gk["x"] + gv["x"])
        g_s1 = gq["s_in"] + gk["s_in"] + gv["s_in"] - np.sum(g_x1 * f.x1, axis=0) / s["qkv"]
        g_d1 = gq["delta_in"] + gk["delta_in"] + gv["delta_in"] - np.sum(g_x1, axis=0) / s["qkv"]

        grads["qkv.log_s_c"] = g_s1 * s["qkv"]
        grads["qkv.delta"] = g_d1
        grads["out.log_s_c"] = g_s2 * s["out"]
        grads["out.delta"] = g_d2
        grads["up.log_s_c"] = g_s3 * s["up"]
        grads["up.delta"] = g_d3
        s_a_head = np.exp(params["attn.log_s_a"])
        grads["attn.log_s_a"] = g_s_a.reshape(self.n_heads, self.head_dim).sum(axis=0) * s_a_head
        return grads

    def fold(self, params) -> Block:
        """Block with folded norms, biases and quantized weights."""
        s, d, _ = self._scales(params)
        blk = self.block

        def fold_linear(name: str, lin: Linear) -> Linear:
            w_eff, b_eff, cfg = self._effective(params, name)
            return Linear(quantize(w_eff, cfg), b_eff)

        folded = blk.map_linears(fold_linear)
        folded.ln1_gain, folded.ln1_bias = fold_scale_into_norm(
            blk.ln1_gain, blk.ln1_bias, SmoothParams(s_c=s["qkv"], delta=d["qkv"]))
        folded.ln2_gain, folded.ln2_bias = fold_scale_into_norm(
            blk.ln2_gain, blk.ln2_bias, SmoothParams(s_c=s["up"], delta=d["up"]))
        return folded

    def _effective(self, params, name: str):
        sm = self._smoothing(params)[name]
        w_prime = reconstruct(_lsi_values(self.lsi[name], params, f"{name}."))
        w_eff = effective_weight(w_prime, sm.get("s_in"), sm.get("c"))
        b_eff = effective_bias(getattr(self.block, name).bias, w_prime, sm.get("delta_in"),
                               sm.get("c"), sm.get("delta_out"))
        return w_eff, b_eff, _with_clip(self.cfg, params, f"{name}.")

    def grid_distance(self, params) -> float:
        """Mean grid distance over the six effective weights."""
        dists = []
        for name in LINEARS:
            w_eff, _, cfg = self._effective(params, name)
            dists.append(grid_distance(w_eff, cfg))
        return float(np.mean(dists))


def layer_loss(unit: CalibrationUnit, calib_x: Matrix, params: Optional[Dict[str, np.ndarray]] = None,
               target: Optional[Matrix] = None) -> float:
    """
    Reconstruction MSE between the full-precision output and the quantized output.

    Args:
        unit: Calibration unit
        calib_x: Input of the quantized branch (and of the fp branch when target is None)
        params: Parameter values, the neutral RTN state by default
        target: Full-precision output, computed from calib_x when omitted
    """
    if calib_x.shape[0] < 1:
        raise LsiQuantError("calibration batch is empty")
    params = unit.neutral_params() if params is None else params
    target = unit.fp_forward(calib_x) if target is None else target
    return unit.loss(params, calib_x, target)


@dataclass
class LayerResult:
    """Outcome of calibrating one unit."""

    params: Dict[str, np.ndarray]
    loss: float
    rtn_loss: float
    initial_loss: float
    epochs_run: int
    trace: List[Dict[str, Any]]

    @property
    def reduction(self) -> float:
        """Fractional loss reduction against RTN."""
        if self.rtn_loss <= 0.0:
            return 0.0
        return (self.rtn_loss - self.loss) / self.rtn_loss


def _batches(n_samples: int, seq_len: int, batch_size: int, rng) -> List[np.ndarray]:
    order = rng.permutation(n_samples)
    rows = []
    for start in range(0, n_samples, batch_size):
        samples = np.sort(order[start:start + batch_size])
        rows.append((samples[:, None] * seq_len + np.arange(seq_len)[None, :]).reshape(-1))
    return rows


def _phases(names: List[str], cfg: TrainConfig) -> List[List[str]]:
    if cfg.mode != MODE_FINETUNE:
        return [names]
    lsi = [n for n in names if _param_kind(n) in LSI_PARAMS]
    rest = [n for n in names if _param_kind(n) not in LSI_PARAMS]
    return [p for p in (lsi, rest) if p]


def calibrate_layer(unit: CalibrationUnit, calib_x: Matrix, cfg: TrainConfig,
                    target: Optional[Matrix] = None, layer: int = 0,
                    score: Optional[Callable[[Dict[str, np.ndarray]], float]] = None) -> LayerResult:
    """
    Train one unit and return its best parameters.

    The neutral RTN state and the starting state are candidates too, so
    without a score the returned loss never exceeds the RTN loss.
    Gradients are taken of the loss divided by the RTN loss.

    Args:
        score: Ranks the candidates instead of the unit loss (lower is
               better); the neutral state stays a candidate

    Raises:
        DivergenceError: an epoch ended above divergence_factor x the starting loss
        TrainingError: a gradient turned non-finite
    """
    target = unit.fp_forward(calib_x) if target is None else target
    neutral = unit.neutral_params()
    rtn_loss = unit.loss(neutral, calib_x, target)
    if rtn_loss == 0.0:
        logger.info(f"Layer {layer}: quantization is already exact, nothing to train")
        return LayerResult(neutral, 0.0, 0.0, 0.0, 0, [])

    start = unit.init_params(cfg)
    names = unit.trainable_names(start, cfg)
    if not names:
        return LayerResult(neutral, rtn_loss, rtn_loss, rtn_loss, 0, [])
    if cfg.train_lsi:
        unit.check_budget(cfg.max_trainable_fraction)

    def merit(params, loss: float) -> float:
        return loss if score is None else score(params)

    initial_loss = unit.loss(start, calib_x, target)
    best_merit, best_loss, best = merit(neutral, rtn_loss), rtn_loss, neutral
    start_merit = merit(start, initial_loss)
    if start_merit < best_merit:
        best_merit, best_loss, best = start_merit, initial_loss, start
    group = ParamGroup.create({n: start[n] for n in names})
    rng = seeded_rng(cfg.seed * 1000 + layer)
    n_samples = calib_x.shape[0] // unit.seq_len
    grad_scale = 1.0 / rtn_loss
    trace: List[Dict[str, Any]] = []

    for epoch in range(1, cfg.epochs + 1):
        for phase in _phases(names, cfg):
            for rows in _batches(n_samples, unit.seq_len, cfg.batch_size, rng):
                values = {**start, **group.values}
                _, grads = unit.loss_and_grads(values, calib_x[rows], target[rows])
                try:
                    group = adam_step(group, {n: grads[n] * grad_scale for n in phase}, cfg)
                except TrainingError as e:
                    raise TrainingError(f"layer {layer}: {e}", layer=layer,
                                        parameter=e.parameter, trace=trace) from e
        current = {**start, **group.values}
        loss = unit.loss(current, calib_x, target)
        record = {"layer": layer, "epoch": epoch, "loss": loss, "inorm": unit.increment_norm(current)}
        trace.append(record)
        trace_logger.info(f"layer={layer} epoch={epoch} loss={loss!r} inorm={record['inorm']!r}")
        if not np.isfinite(loss) or loss > cfg.divergence_factor * initial_loss:
            raise DivergenceError(
                f"layer {layer} diverged at epoch {epoch}: loss {loss:.6g} vs initial {initial_loss:.6g}",
                layer=layer, trace=trace)
        current_merit = merit(current, loss)
        if current_merit < best_merit:
            best_merit, best_loss, best = current_merit, loss, current

    logger.info(f"Layer {layer}: RTN loss {rtn_loss:.6g} -> {best_loss:.6g}")
    return LayerResult(best, best_loss, rtn_loss, initial_loss, cfg.epochs, trace)


@dataclass
class CalibrationResult:
    model: LayerGraph
    layers: List[Dict[str, Any]]
    params: Dict[int, Dict[str, np.ndarray]]

    @property
    def mean_loss(self) -> float:
        return float(np.mean([r["loss"] for r in self.layers]))

    @property
    def mean_rtn_loss(self) -> float:
        return float(np.mean([r["rtn_loss"] for r in self.layers]))


def _block_unit(block: Block, model: LayerGraph, mode: ForwardMode, cfg: TrainConfig,
                seq_len: int, layer: int) -> BlockUnit:
    rng = seeded_rng(cfg.seed * 1000 + 500 + layer)
    square_n = cfg.square_n if cfg.train_lsi else 0
    return BlockUnit(block, mode.weight_config(), model.spec.n_heads, seq_len,
                     act_bits=mode.active_act_bits, square_n=square_n,
                     max_fraction=cfg.max_trainable_fraction, init=cfg.init, rng=rng,
                     ste_clip=cfg.ste_clip, act_per_sequence=mode.act_per_sequence)


def _layer_report(layer: int, unit: BlockUnit, result: LayerResult) -> Dict[str, Any]:
    return {
        "layer": layer,
        "rtn_loss": result.rtn_loss,
        "loss": result.loss,
        "reduction_pct": 100.0 * result.reduction,
        "epochs": result.epochs_run,
        "grid_distance_before": unit.grid_distance(unit.neutral_params()),
        "grid_distance_after": unit.grid_distance(result.params),
        "square_n": unit.square_ns(),
        "lsi_fraction": unit.lsi_fraction(),
        "trace": result.trace,
    }


def _block_score(score_blocks: Callable[[List[Block]], float], blocks: List[Block],
                 i: int, unit: BlockUnit) -> Callable[[Dict[str, np.ndarray]], float]:
    def score(params: Dict[str, np.ndarray]) -> float:
        return score_blocks(blocks[:i] + [unit.fold(params)] + blocks[i + 1:])
    return score


def _calibrate_blocks(model: LayerGraph, reference: LayerGraph, layers: Sequence[int],
                      data: CalibSet, mode: ForwardMode, cfg: TrainConfig,
                      score_blocks: Optional[Callable[[List[Block]], float]] = None
                      ) -> CalibrationResult:
    x_fp = embed(reference, data)
    x_q = x_fp
    blocks = list(model.blocks)
    reports, params = [], {}
    n_heads, seq_len = model.spec.n_heads, data.seq_len
    for i, block in enumerate(model.blocks):
        target = block_forward(reference.blocks[i], x_fp, ForwardMode(), n_heads, seq_len)
        if i in layers:
            unit = _block_unit(block, model, mode, cfg, seq_len, i)
            inputs = x_q if cfg.propagate_errors else x_fp
            score = _block_score(score_blocks, blocks, i, unit) if score_blocks else None
            result = calibrate_layer(unit, inputs, cfg, target=target, layer=i, score=score)
            folded = unit.fold(result.params)
            candidate = blocks[:i] + [folded] + blocks[i + 1:]
            if score_blocks is None or score_blocks(candidate) < score_blocks(blocks):
                blocks[i] = folded
            reports.append(_layer_report(i, unit, result))
            params[i] = result.params
        x_q = block_forward(blocks[i], x_q, mode, n_heads, seq_len)
        x_fp = target
    return CalibrationResult(model.with_blocks(blocks), reports, params)


def calibrate_model(model: LayerGraph, calib_set: CalibSet, cfg: TrainConfig,
                    mode: ForwardMode) -> CalibrationResult:
    """
    Calibrate every block in order and fold it.

    Each block's quantized branch sees the quantized output of the
    already-folded blocks before it (unless propagate_errors is off);
    its target is always the full-precision output.
    """
    if mode.is_fp:
        raise ConfigurationError("calibration needs a weight bit width")
    logger.info(f"Calibrating {len(model.blocks)} blocks at {mode.label} "
                f"on {calib_set.n_samples} samples")
    return _calibrate_blocks(model, model, range(len(model.blocks)), calib_set, mode, cfg)


def hidden_mse(model: LayerGraph, reference: LayerGraph, data: CalibSet, mode: ForwardMode) -> float:
    """End-to-end MSE of final hidden states against the full-precision reference."""
    return frobenius_mse(final_hidden(model, data, mode), final_hidden(reference, data, ForwardMode()))


def finetune_last_layers(model: LayerGraph, reference: LayerGraph, data: CalibSet,
                         cfg: TrainConfig, mode: ForwardMode) -> CalibrationResult:
    """
    Re-train LSI (then smoothing and clipping) on the last L blocks of a
    quantized model only. Earlier blocks keep their codes. Each block keeps
    the epoch with the lowest end-to-end loss on the target set; if that
    loss would still rise the input model is returned unchanged.
    """
    if cfg.mode != MODE_FINETUNE:
        raise ConfigurationError("finetune_last_layers needs mode finetune_last")
    n = len(model.blocks)
    if cfg.finetune_last > n:
        raise ConfigurationError(f"cannot finetune the last {cfg.finetune_last} of {n} layers")
    layers = range(n - cfg.finetune_last, n)
    before = hidden_mse(model, reference, data, mode)
    result = _calibrate_blocks(
        model, reference, layers, data, mode, cfg,
        score_blocks=lambda blocks: hidden_mse(model.with_blocks(blocks), reference, data, mode))
    after = hidden_mse(result.model, reference, data, mode)
    logger.info(f"Finetune of the last {cfg.finetune_last} layers: target loss {before:.6g} -> {after:.6g}")
    if after > before:
        logger.warning("Finetuning raised the target loss; keeping the input model")
        return CalibrationResult(model, result.layers, {})
    return result
