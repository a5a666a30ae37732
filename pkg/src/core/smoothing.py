"""
Equivalent channel transforms.

    Y = XW + B = [(X - delta) / s_c] [diag(s_c) W] + [B + delta W]

Activations are divided by a per-channel scale and weights multiplied by
it, which moves outlier magnitude from one side of the product to the
other without changing the full-precision result. Attention uses the
scale-only variant on queries and keys.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DomainError, ShapeError
from .tensor_core import Matrix

logger = logging.getLogger(__name__)


def _check_positive(values: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
        raise DomainError(f"{name} must be strictly positive and finite")


@dataclass(frozen=True)
class SmoothParams:
    """Channel scale s_c, channel shift delta and attention scale s_a."""

    s_c: np.ndarray
    delta: np.ndarray
    s_a: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_positive(self.s_c, "s_c")
        if self.delta.shape != self.s_c.shape:
            raise ShapeError(f"delta shape {self.delta.shape} != s_c shape {self.s_c.shape}")
        if not np.all(np.isfinite(self.delta)):
            raise DomainError("delta must be finite")
        if self.s_a is not None:
            _check_positive(self.s_a, "s_a")

    @classmethod
    def identity(cls, channels: int, head_dim: Optional[int] = None) -> "SmoothParams":
        s_a = None if head_dim is None else np.ones(head_dim)
        return cls(s_c=np.ones(channels), delta=np.zeros(channels), s_a=s_a)

    @property
    def channels(self) -> int:
        return int(self.s_c.shape[0])

    def compose(self, other: "SmoothParams") -> "SmoothParams":
        """
        Smoothing with self, then other, as one transform.

        ((x - d1)/s1 - d2)/s2 == (x - (d1 + s1*d2)) / (s1*s2)
        """
        s_a = self.s_a
        if other.s_a is not None:
            s_a = other.s_a if s_a is None else s_a * other.s_a
        return SmoothParams(s_c=self.s_c * other.s_c,
                            delta=self.delta + self.s_c * other.delta,
                            s_a=s_a)

    def inverse(self) -> "SmoothParams":
        """Transform that undoes self when composed after it."""
        s_a = None if self.s_a is None else 1.0 / self.s_a
        return SmoothParams(s_c=1.0 / self.s_c, delta=-self.delta / self.s_c, s_a=s_a)


def smooth_linear(x: Matrix, w: Matrix, b: np.ndarray,
                  p: SmoothParams) -> Tuple[Matrix, Matrix, np.ndarray]:
    """
    Migrate channel magnitude from activations into weights.

    Args:
        x: Activations (tokens x in_features)
        w: Weight (in_features x out_features)
        b: Bias (out_features)
        p: Smoothing parameters over in_features

    Returns:
        (x_smoothed, w_smoothed, b_smoothed) with x~ w~ + b~ == x w + b
    """
    if x.shape[1] != w.shape[0] or w.shape[0] != p.channels:
        raise ShapeError(
            f"smoothing {p.channels} channels does not fit x {x.shape} and w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias length {b.shape} does not match {w.shape[1]} outputs")
    x_s = (x - p.delta) / p.s_c
    w_s = p.s_c[:, None] * w
    b_s = b + p.delta @ w
    return x_s, w_s, b_s


def smooth_attention(q: Matrix, k: Matrix, p: SmoothParams) -> Tuple[Matrix, Matrix]:
    """Scale queries down and keys up per head dimension; q k^T is preserved."""
    if p.s_a is None:
        raise ShapeError("attention smoothing needs s_a")
    if q.shape[1] != p.s_a.shape[0] or k.shape[1] != p.s_a.shape[0]:
        raise ShapeError(
            f"s_a of length {p.s_a.shape[0]} does not fit q {q.shape} and k {k.shape}")
    return q / p.s_a, k * p.s_a


def fold_scale_into_norm(norm_gain: np.ndarray, norm_bias: np.ndarray,
                         p: SmoothParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Absorb the activation side of a smoothing transform into the norm
    that produces those activations.

    Returns:
        (gain / s_c, (bias - delta) / s_c)
    """
    if norm_gain.shape != p.s_c.shape or norm_bias.shape != p.s_c.shape:
        raise ShapeError(
            f"norm parameters {norm_gain.shape}/{norm_bias.shape} do not match s_c {p.s_c.shape}")
    return norm_gain / p.s_c, (norm_bias - p.delta) / p.s_c
