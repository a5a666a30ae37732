"""
Uniform affine quantization.

    codes = clamp(round(w / s_h) + z, 0, 2^k - 1)
    w~    = (codes - z) * s_h

Weights are stored in_features x out_features. Per-channel groups are
output channels (columns); group-wise granularity splits every column
into contiguous runs of `group_size` input rows. Learnable weight
clipping shrinks the [min, max] range of each group by sigmoid factors.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError
from .tensor_core import Matrix

logger = logging.getLogger(__name__)

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
GROUP = "group"
GRANULARITIES = (PER_TENSOR, PER_CHANNEL, GROUP)

WEIGHT = "weight"
ACTIVATION = "activation"

# sigmoid(CLIP_INIT_LOGIT) == 1 - 1e-4
CLIP_INIT_LOGIT = float(np.log((1.0 - 1e-4) / 1e-4))

# Scales are floored to this many significant bits so integer codes
# times the scale are exact in float64. A snapped step lies at most
# 2^-40 (relative) below span / qmax, e.g. 2 / 255 becomes
# 0.007843137254894827.
SCALE_MANTISSA_BITS = 40

ACTIVATION_PASSTHROUGH_BITS = 8


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass(frozen=True)
class ClipLogits:
    """Per-group LWC logits: hi = sigmoid(gamma)*max, lo = sigmoid(beta)*min."""

    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def initial(cls, n_groups: int, logit: float = CLIP_INIT_LOGIT) -> "ClipLogits":
        return cls(gamma=np.full(n_groups, logit), beta=np.full(n_groups, logit))


@dataclass(frozen=True)
class QuantConfig:
    """Bit width, grouping and optional clipping for one tensor."""

    bits: int
    granularity: str = PER_CHANNEL
    group_size: int = 0
    target: str = WEIGHT
    clip: Optional[ClipLogits] = field(default=None, compare=False)

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"Unknown granularity: {self.granularity}")
        if self.target == WEIGHT:
            if not 2 <= self.bits <= 8:
                raise ConfigurationError(f"Weight bits must lie in [2, 8], got {self.bits}")
            if self.granularity == PER_TENSOR:
                raise ConfigurationError(
                    "Weights use per_channel or group granularity",
                    hint="Activations are the per-tensor target")
        elif self.target == ACTIVATION:
            if not 2 <= self.bits <= 16:
                raise ConfigurationError(f"Activation bits must lie in [2, 16], got {self.bits}")
            if self.granularity != PER_TENSOR:
                raise ConfigurationError("Activations use per_tensor granularity")
        else:
            raise ConfigurationError(f"Unknown quantization target: {self.target}")
        if self.granularity == GROUP and self.group_size < 1:
            raise ConfigurationError("group granularity needs group_size >= 1")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def label(self) -> str:
        if self.granularity == GROUP:
            return f"w{self.bits}g{self.group_size}"
        return f"w{self.bits}"

    def n_groups(self, shape: Tuple[int, int]) -> int:
        rows, cols = shape
        if self.granularity == PER_TENSOR:
            return 1
        if self.granularity == PER_CHANNEL:
            return cols
        return cols * (rows // self.group_size)

    def validate_for(self, shape: Tuple[int, int]) -> None:
        rows, cols = shape
        if rows < 1 or cols < 1:
            raise ShapeError(f"cannot quantize an empty tensor of shape {shape}")
        if self.granularity == GROUP and rows % self.group_size:
            raise ShapeError(
                f"group size {self.group_size} does not divide input dimension {rows}")
        if self.clip is not None:
            n = self.n_groups(shape)
            if self.clip.gamma.shape != (n,) or self.clip.beta.shape != (n,):
                raise ShapeError(f"clip logits must have one entry per group ({n})")

    def with_clip(self, clip: Optional[ClipLogits]) -> "QuantConfig":
        return replace(self, clip=clip)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus per-group scale and zero point."""

    codes: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    shape: Tuple[int, int]
    config: QuantConfig

    @property
    def bits(self) -> int:
        return self.config.bits


def group_view(w: Matrix, cfg: QuantConfig) -> np.ndarray:
    """Rearrange w into (n_groups, group_len) rows in column-major group order."""
    rows, cols = w.shape
    if cfg.granularity == PER_TENSOR:
        return w.reshape(1, rows * cols)
    if cfg.granularity == PER_CHANNEL:
        return np.ascontiguousarray(w.T)
    g = cfg.group_size
    return np.ascontiguousarray(w.T).reshape(cols * (rows // g), g)


def ungroup(groups: np.ndarray, shape: Tuple[int, int], cfg: QuantConfig) -> np.ndarray:
    """Inverse of group_view."""
    rows, cols = shape
    if cfg.granularity == PER_TENSOR:
        return groups.reshape(rows, cols)
    return np.ascontiguousarray(groups.reshape(cols, rows).T)


def snap_scale(s: np.ndarray) -> np.ndarray:
    mantissa, exponent = np.frexp(s)
    return np.ldexp(np.floor(np.ldexp(mantissa, SCALE_MANTISSA_BITS)),
                    exponent - SCALE_MANTISSA_BITS)


def clipped_range(groups: np.ndarray, clip: Optional[ClipLogits]):
    """
    Clipped per-group range.

    Returns:
        (lo, hi, lo_raw, hi_raw, lo_idx, hi_idx); the indices are the
        first positions attaining the raw min/max.
    """
    lo_idx = np.argmin(groups, axis=1)
    hi_idx = np.argmax(groups, axis=1)
    take = np.arange(groups.shape[0])
    lo_raw = groups[take, lo_idx]
    hi_raw = groups[take, hi_idx]
    if clip is None:
        return lo_raw, hi_raw, lo_raw, hi_raw, lo_idx, hi_idx
    lo = sigmoid(clip.beta) * lo_raw
    hi = sigmoid(clip.gamma) * hi_raw
    return lo, hi, lo_raw, hi_raw, lo_idx, hi_idx


def scale_zero(lo: np.ndarray, hi: np.ndarray, qmax: int,
               rounding: Callable = np.rint, snap: Callable = snap_scale):
    """
    Scale and zero point for every group.

    Args:
        lo, hi: Per-group range
        qmax: Largest code
        rounding, snap: Replaceable so training can record the rounding

    Returns:
        (scale, zero_point, degenerate_mask)
    """
    degenerate = hi <= lo
    span = np.where(degenerate, 1.0, hi - lo)
    s = snap(span / qmax)
    z = rounding(-lo / s) + 0.0
    # Constant groups reproduce their value exactly with code 1 or 0.
    const = lo
    s = np.where(degenerate, np.where(const == 0.0, 1.0, np.abs(const)), s)
    z = np.where(degenerate, np.where(const < 0.0, 1.0, 0.0), z)
    return s, z, degenerate


def quantize_groups(groups: np.ndarray, s: np.ndarray, z: np.ndarray, qmax: int) -> np.ndarray:
    pre = np.rint(groups / s[:, None]) + z[:, None]
    return np.clip(pre, 0, qmax).astype(np.int64)


def dequantize_groups(codes: np.ndarray, s: np.ndarray, z: np.ndarray) -> np.ndarray:
    return (codes - z[:, None]) * s[:, None]


def compute_qparams(w_group, cfg: QuantConfig, group_index: int = 0) -> Tuple[float, float]:
    """
    Scale and zero point for a single group.

    Args:
        w_group: Group values (any shape)
        cfg: Quantization config; its clip logits are read at group_index
        group_index: Which group's clip logits apply

    Returns:
        (s_h, z)
    """
    values = np.asarray(w_group, dtype=np.float64).reshape(1, -1)
    if values.size == 0:
        raise DomainError("cannot compute qparams of an empty group")
    if not np.all(np.isfinite(values)):
        raise DomainError("group contains non-finite values")
    clip = None
    if cfg.clip is not None:
        clip = ClipLogits(gamma=cfg.clip.gamma[group_index:group_index + 1],
                          beta=cfg.clip.beta[group_index:group_index + 1])
    lo, hi, *_ = clipped_range(values, clip)
    s, z, _ = scale_zero(lo, hi, cfg.qmax)
    return float(s[0]), float(z[0])


def quantize(w: Matrix, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a matrix into codes with per-group qparams."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"quantize expects a 2-D matrix, got {w.shape}")
    cfg.validate_for(w.shape)
    if not np.all(np.isfinite(w)):
        raise DomainError("cannot quantize non-finite weights")
    groups = group_view(w, cfg)
    lo, hi, *_ = clipped_range(groups, cfg.clip)
    s, z, _ = scale_zero(lo, hi, cfg.qmax)
    codes = quantize_groups(groups, s, z, cfg.qmax)
    return QuantizedTensor(codes=ungroup(codes, w.shape, cfg), scale=s,
                           zero_point=z, shape=tuple(w.shape), config=cfg)


def dequantize(q: QuantizedTensor) -> Matrix:
    """Float view of a quantized tensor."""
    groups = group_view(q.codes, q.config)
    return ungroup(dequantize_groups(groups, q.scale, q.zero_point), q.shape, q.config)


def fake_quantize(w: Matrix, cfg: QuantConfig) -> Matrix:
    """Quantize then dequantize."""
    return dequantize(quantize(w, cfg))


def activation_config(bits: int) -> QuantConfig:
    return QuantConfig(bits=bits, granularity=PER_TENSOR, target=ACTIVATION)


def quantize_activation(x: Matrix, bits: int, seq_len: Optional[int] = None) -> Matrix:
    """
    Dynamic per-tensor fake quantization of activations.

    Args:
        x: Activations, rows are positions
        bits: Bit width; above 8 the activations pass through untouched
        seq_len: When set, every block of seq_len rows (one sequence) gets
                 its own scale; otherwise the whole matrix is one tensor

    Returns:
        Fake-quantized activations
    """
    if bits > ACTIVATION_PASSTHROUGH_BITS:
        return x
    qmax = activation_config(bits).qmax
    x = np.asarray(x, dtype=np.float64)
    rows, cols = x.shape
    seq = rows if seq_len is None else seq_len
    if rows % seq:
        raise ShapeError(f"{rows} rows do not split into sequences of {seq}")
    groups = x.reshape(rows // seq, seq * cols)
    lo, hi, *_ = clipped_range(groups, None)
    s, z, _ = scale_zero(lo, hi, qmax)
    out = dequantize_groups(quantize_groups(groups, s, z, qmax), s, z)
    return out.reshape(rows, cols)
