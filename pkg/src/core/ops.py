"""
Differentiable primitives for calibration.

Every op is a pair of static methods in the autograd-function style:
`forward(ctx, ...)` stores what the backward needs on `ctx` and
`backward(ctx, grad)` returns the input gradients. Rounding is handled
with the straight-through estimator: round() counts as identity, clamp
zeroes the gradient outside the code range.
"""

import logging
from types import SimpleNamespace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .lsi_core import LsiParams
from .quantizer import (ACTIVATION_PASSTHROUGH_BITS, ClipLogits, QuantConfig,
                        clipped_range, group_view, scale_zero, sigmoid,
                        snap_scale, ungroup)
from .tensor_core import Matrix

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
GELU_COEF = 0.044715
GELU_SCALE = float(np.sqrt(2.0 / np.pi))


def Ctx() -> SimpleNamespace:
    return SimpleNamespace()


class RoundingTape:
    """
    Records what every rounding and clamping step did during one forward pass.

    In replay mode each rounding adds back the recorded residual
    instead of rounding and each clamp keeps its recorded in-range
    mask, which turns the quantized forward into the smooth surrogate
    the straight-through estimator differentiates. Calls must happen in
    the recorded order.
    """

    def __init__(self):
        self.residuals: List[np.ndarray] = []
        self.replaying = False
        self._cursor = 0

    def replay(self) -> "RoundingTape":
        self.replaying = True
        self._cursor = 0
        return self

    def apply(self, fn: Callable, v: np.ndarray) -> np.ndarray:
        if not self.replaying:
            out = fn(v)
            self.residuals.append(out - v)
            return out
        residual = self.residuals[self._cursor]
        self._cursor += 1
        return v + residual

    def rint(self, v: np.ndarray) -> np.ndarray:
        return self.apply(np.rint, v)

    def snap(self, v: np.ndarray) -> np.ndarray:
        return self.apply(snap_scale, v)

    def clamp(self, v: np.ndarray, lo: float, hi: float) -> np.ndarray:
        if not self.replaying:
            out = np.clip(v, lo, hi)
            # NaN marks entries that were inside the range
            self.residuals.append(np.where((v >= lo) & (v <= hi), np.nan, out))
            return out
        held = self.residuals[self._cursor]
        self._cursor += 1
        return np.where(np.isnan(held), v, held)


def _rounders(tape: Optional[RoundingTape]):
    if tape is None:
        return np.rint, snap_scale, np.clip
    return tape.rint, tape.snap, tape.clamp


def _fq_forward(groups: np.ndarray, clip: Optional[ClipLogits], qmax: int,
                tape: Optional[RoundingTape], ste_clip: bool):
    rint, snap, clamp = _rounders(tape)
    lo, hi, lo_raw, hi_raw, lo_idx, hi_idx = clipped_range(groups, clip)
    s, z, degenerate = scale_zero(lo, hi, qmax, rounding=rint, snap=snap)
    pre = rint(groups / s[:, None]) + z[:, None]
    codes = clamp(pre, 0, qmax)
    out = (codes - z[:, None]) * s[:, None]
    if ste_clip:
        mask = ((pre >= 0) & (pre <= qmax)).astype(np.float64)
    else:
        mask = np.ones_like(pre)
    cache = SimpleNamespace(groups=groups, clip=clip, qmax=qmax, lo=lo, s=s, z=z,
                            codes=codes, mask=mask, degenerate=degenerate,
                            lo_raw=lo_raw, hi_raw=hi_raw, lo_idx=lo_idx, hi_idx=hi_idx)
    return out, cache


def _fq_backward(c: SimpleNamespace, g: np.ndarray):
    """Gradients of grouped fake quantization w.r.t. the groups and clip logits."""
    g_groups = g * c.mask
    s = c.s[:, None]
    g_s = np.sum(g * (c.codes - c.z[:, None]), axis=1)
    g_s += np.sum(g * c.mask * (-c.groups / s), axis=1)
    g_z = np.sum(-g * s, axis=1) + np.sum(g * s * c.mask, axis=1)
    # z = round(-lo / s), s = (hi - lo) / qmax
    g_s = g_s + g_z * c.lo / (c.s * c.s)
    g_lo = -g_z / c.s - g_s / c.qmax
    g_hi = g_s / c.qmax
    keep = ~c.degenerate
    g_lo = np.where(keep, g_lo, 0.0)
    g_hi = np.where(keep, g_hi, 0.0)

    g_gamma = g_beta = None
    if c.clip is None:
        g_lo_raw, g_hi_raw = g_lo, g_hi
    else:
        sig_g = sigmoid(c.clip.gamma)
        sig_b = sigmoid(c.clip.beta)
        g_gamma = g_hi * c.hi_raw * sig_g * (1.0 - sig_g)
        g_beta = g_lo * c.lo_raw * sig_b * (1.0 - sig_b)
        g_lo_raw, g_hi_raw = g_lo * sig_b, g_hi * sig_g
    take = np.arange(g_groups.shape[0])
    np.add.at(g_groups, (take, c.lo_idx), g_lo_raw)
    np.add.at(g_groups, (take, c.hi_idx), g_hi_raw)
    return g_groups, g_gamma, g_beta


class FakeQuant:
    """Weight fake quantization with learnable clipping."""

    @staticmethod
    def forward(ctx, w: Matrix, cfg: QuantConfig, tape: Optional[RoundingTape] = None,
                ste_clip: bool = True) -> Matrix:
        cfg.validate_for(w.shape)
        out, cache = _fq_forward(group_view(w, cfg), cfg.clip, cfg.qmax, tape, ste_clip)
        ctx.fq = cache
        ctx.cfg = cfg
        ctx.shape = w.shape
        return ungroup(out, w.shape, cfg)

    @staticmethod
    def backward(ctx, grad: Matrix):
        """Returns (grad_w, grad_gamma, grad_beta); the logit grads are None without clipping."""
        g_groups, g_gamma, g_beta = _fq_backward(ctx.fq, group_view(grad, ctx.cfg))
        return ungroup(g_groups, ctx.shape, ctx.cfg), g_gamma, g_beta


class ActQuant:
    """
    Dynamic per-tensor fake quantization of activations (one scale per
    sequence when seq_len is given).
    """

    @staticmethod
    def forward(ctx, x: Matrix, bits: Optional[int], seq_len: Optional[int] = None,
                tape: Optional[RoundingTape] = None, ste_clip: bool = True) -> Matrix:
        ctx.active = bits is not None and bits <= ACTIVATION_PASSTHROUGH_BITS
        if not ctx.active:
            return x
        rows, cols = x.shape
        seq = rows if seq_len is None else seq_len
        groups = x.reshape(rows // seq, seq * cols)
        out, ctx.fq = _fq_forward(groups, None, (1 << bits) - 1, tape, ste_clip)
        ctx.shape = x.shape
        return out.reshape(rows, cols)

    @staticmethod
    def backward(ctx, grad: Matrix) -> Matrix:
        if not ctx.active:
            return grad
        g_groups, _, _ = _fq_backward(ctx.fq, grad.reshape(ctx.fq.groups.shape))
        return g_groups.reshape(ctx.shape)


def effective_weight(w: Matrix, s_in: Optional[np.ndarray], c: Optional[np.ndarray]) -> Matrix:
    """diag(s_in) w diag(c)"""
    if s_in is not None:
        w = s_in[:, None] * w
    if c is not None:
        w = w * c[None, :]
    return w


def effective_bias(b: np.ndarray, w: Matrix, delta_in: Optional[np.ndarray],
                   c: Optional[np.ndarray], delta_out: Optional[np.ndarray]) -> np.ndarray:
    """(b + delta_in w - delta_out) * c"""
    if delta_in is not None:
        b = b + delta_in @ w
    if delta_out is not None:
        b = b - delta_out
    if c is not None:
        b = b * c
    return b


class QuantLinear:
    """
    y = x_q FQ(diag(s_in) W' diag(c)) + (b + delta_in W' - delta_out) * c

    s_in/delta_in carry the smoothing of this layer's input, c/delta_out
    the smoothing of its output when the next consumer is smoothed too.
    Any of them may be None.
    """

    @staticmethod
    def forward(ctx, x_q: Matrix, w_prime: Matrix, bias: np.ndarray, cfg: QuantConfig,
                s_in=None, delta_in=None, c=None, delta_out=None,
                tape: Optional[RoundingTape] = None, ste_clip: bool = True) -> Matrix:
        w_eff = effective_weight(w_prime, s_in, c)
        ctx.fq = Ctx()
        w_q = FakeQuant.forward(ctx.fq, w_eff, cfg, tape, ste_clip)
        b_pre = effective_bias(bias, w_prime, delta_in, None, delta_out)
        b_eff = b_pre if c is None else b_pre * c
        ctx.saved = (x_q, w_prime, w_q, b_pre, s_in, delta_in, c, delta_out)
        return x_q @ w_q + b_eff

    @staticmethod
    def backward(ctx, grad: Matrix) -> Dict[str, np.ndarray]:
        x_q, w_prime, w_q, b_pre, s_in, delta_in, c, delta_out = ctx.saved
        out = {"x": grad @ w_q.T}
        g_w_eff, out["gamma"], out["beta"] = FakeQuant.backward(ctx.fq, x_q.T @ grad)
        g_b_eff = grad.sum(axis=0)

        cols = np.ones(w_prime.shape[1]) if c is None else c
        rows = np.ones(w_prime.shape[0]) if s_in is None else s_in
        g_pre = g_b_eff * cols
        out["w"] = g_w_eff * rows[:, None] * cols[None, :]
        if delta_in is not None:
            out["w"] += np.outer(delta_in, g_pre)
            out["delta_in"] = w_prime @ g_pre
        if s_in is not None:
            out["s_in"] = np.sum(g_w_eff * w_prime * cols[None, :], axis=1)
        if c is not None:
            out["c"] = np.sum(g_w_eff * rows[:, None] * w_prime, axis=0) + g_b_eff * b_pre
        if delta_out is not None:
            out["delta_out"] = -g_pre
        return out


def lsi_backward(p: LsiParams, g_w: Matrix) -> Tuple[np.ndarray, Optional[Matrix]]:
    """Gradients of reconstruct(p) w.r.t. (I', K) given the weight gradient."""
    m = p.factors.u.T @ g_w @ p.factors.v_h.T
    g_inc = np.diag(m).copy()
    g_block = None
    if p.square_block is not None:
        n = p.square_n
        g_block = m[:n, :n].copy()
    return g_inc, g_block


class LayerNorm:

    @staticmethod
    def forward(ctx, x: Matrix, gain: np.ndarray, bias: np.ndarray) -> Matrix:
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + LAYER_NORM_EPS)
        x_hat = centered * inv_std
        ctx.x_hat, ctx.inv_std, ctx.gain = x_hat, inv_std, gain
        return x_hat * gain + bias

    @staticmethod
    def backward(ctx, grad: Matrix) -> Matrix:
        g_hat = grad * ctx.gain
        return ctx.inv_std * (g_hat - g_hat.mean(axis=1, keepdims=True)
                              - ctx.x_hat * (g_hat * ctx.x_hat).mean(axis=1, keepdims=True))


class Gelu:
    """tanh approximation"""

    @staticmethod
    def forward(ctx, x: Matrix) -> Matrix:
        t = np.tanh(GELU_SCALE * (x + GELU_COEF * x ** 3))
        ctx.x, ctx.t = x, t
        return 0.5 * x * (1.0 + t)

    @staticmethod
    def backward(ctx, grad: Matrix) -> Matrix:
        x, t = ctx.x, ctx.t
        dt = (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
        return grad * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _split_heads(x: Matrix, seq_len: int, n_heads: int) -> np.ndarray:
    rows, width = x.shape
    return x.reshape(rows // seq_len, seq_len, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> Matrix:
    n_seq, n_heads, seq_len, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n_seq * seq_len, n_heads * head_dim)


class CausalAttention:
    """
    Multi-head causal attention over already projected q, k, v.

    The softmax and its inputs stay in full precision.
    """

    @staticmethod
    def forward(ctx, q: Matrix, k: Matrix, v: Matrix, n_heads: int, seq_len: int) -> Matrix:
        qh, kh, vh = (_split_heads(t, seq_len, n_heads) for t in (q, k, v))
        scale = 1.0 / np.sqrt(qh.shape[-1])
        scores = np.einsum("bhid,bhjd->bhij", qh, kh) * scale
        causal = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
        scores = np.where(causal, -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx.saved = (qh, kh, vh, probs, scale, n_heads, seq_len)
        return _merge_heads(np.einsum("bhij,bhjd->bhid", probs, vh))

    @staticmethod
    def backward(ctx, grad: Matrix) -> Tuple[Matrix, Matrix, Matrix]:
        qh, kh, vh, probs, scale, n_heads, seq_len = ctx.saved
        g_o = _split_heads(grad, seq_len, n_heads)
        g_v = np.einsum("bhij,bhid->bhjd", probs, g_o)
        g_p = np.einsum("bhid,bhjd->bhij", g_o, vh)
        g_scores = probs * (g_p - np.sum(g_p * probs, axis=-1, keepdims=True)) * scale
        g_q = np.einsum("bhij,bhjd->bhid", g_scores, kh)
        g_k = np.einsum("bhij,bhid->bhjd", g_scores, qh)
        return _merge_heads(g_q), _merge_heads(g_k), _merge_heads(g_v)


def attention_probs(q: Matrix, k: Matrix, n_heads: int, seq_len: int) -> np.ndarray:
    """Softmax rows of the attention forward, shape (seqs, heads, T, T)."""
    ctx = Ctx()
    CausalAttention.forward(ctx, q, k, np.zeros_like(q), n_heads, seq_len)
    return ctx.saved[3]


def gradcheck(fn: Callable[[Dict[str, np.ndarray]], float],
              params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              h: float = 1e-4, floor: float = 1e-8) -> Dict[str, np.ndarray]:
    """
    Central-difference check of analytic gradients.

    Args:
        fn: Scalar loss of a parameter dict; must not mutate it
        params: Point to check at
        grads: Analytic gradients, same keys and shapes
        h: Step
        floor: Added to the denominator so zero gradients compare sanely

    Returns:
        Per-parameter arrays of relative errors
    """
    errors = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        for i in range(value.size):
            shifted = dict(params)
            bumped = value.copy()
            bumped.flat[i] = value.flat[i] + h
            shifted[name] = bumped
            up = fn(shifted)
            bumped = value.copy()
            bumped.flat[i] = value.flat[i] - h
            shifted[name] = bumped
            down = fn(shifted)
            numeric.flat[i] = (up - down) / (2.0 * h)
        analytic = grads[name]
        errors[name] = np.abs(numeric - analytic) / (np.maximum(np.abs(numeric), np.abs(analytic)) + floor)
        logger.debug(f"gradcheck {name}: max rel err {errors[name].max():.3e}")
    return errors
