"""
Learnable singular value increments.

A weight W = U diag(S) V_h is perturbed on its singular values by a
trainable vector I' and, for group-wise quantization, on the top-left
n x n block of the singular value matrix by a trainable square block K.
The perturbed weight is what gets quantized. After training the
perturbation is folded into a plain quantized tensor.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError
from .quantizer import (GROUP, QuantConfig, QuantizedTensor, clipped_range,
                        fake_quantize, group_view, quantize, scale_zero)
from .tensor_core import Matrix, RandomStream, SvdFactors, as_matrix, svd

logger = logging.getLogger(__name__)

DEFAULT_SQUARE_N = 200
INIT_ZEROS = "zeros"
INIT_RANDOM = "random"
RANDOM_INIT_STD = 1e-3


@dataclass(frozen=True)
class LsiParams:
    """Frozen SVD factors of the original weight plus the trainable I' and K."""

    base: Matrix
    factors: SvdFactors
    increment: np.ndarray
    square_block: Optional[Matrix] = None

    def __post_init__(self):
        r = self.factors.rank_dim
        if self.increment.shape != (r,):
            raise ShapeError(f"increment must have length {r}, got {self.increment.shape}")
        if self.square_block is not None:
            n = self.square_block.shape[0]
            if self.square_block.shape != (n, n) or not 1 <= n <= r:
                raise ShapeError(
                    f"square block must be n x n with 1 <= n <= {r}, got {self.square_block.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.base.shape)

    @property
    def rank_dim(self) -> int:
        return self.factors.rank_dim

    @property
    def square_n(self) -> int:
        return 0 if self.square_block is None else int(self.square_block.shape[0])

    def with_values(self, increment: np.ndarray,
                    square_block: Optional[Matrix] = None) -> "LsiParams":
        return replace(self, increment=increment,
                       square_block=self.square_block if square_block is None else square_block)


def default_square_n(cfg: QuantConfig, shape: Tuple[int, int], requested: Optional[int] = None,
                     max_fraction: Optional[float] = None) -> int:
    """
    Square block dimension for a weight of the given shape.

    Only group-wise configs get a block. An explicit request is clamped
    to r; the default of 200 is additionally shrunk to fit the budget.
    """
    if cfg.granularity != GROUP:
        if requested:
            raise ConfigurationError(
                "square block needs group-wise quantization",
                hint="Set a group size or drop the square block dimension")
        return 0
    r = min(shape)
    if requested is not None:
        if requested < 0:
            raise ConfigurationError(f"square block dimension must be >= 0, got {requested}")
        return min(requested, r)
    n = min(DEFAULT_SQUARE_N, r)
    if max_fraction is not None:
        room = max_fraction * shape[0] * shape[1] - r
        n = min(n, int(np.floor(np.sqrt(max(room, 0.0)))))
    return n


def capture(w: Matrix, square_n: int = 0, init: str = INIT_ZEROS,
            rng: Optional[RandomStream] = None) -> LsiParams:
    """
    Decompose a weight and attach a zero (or small random) increment.

    Args:
        w: Weight matrix
        square_n: Square block dimension, 0 disables K
        init: "zeros" or "random"
        rng: Random stream, required for random init

    Returns:
        LsiParams whose reconstruction is w
    """
    w = as_matrix(w, "weight")
    factors = svd(w)
    r = factors.rank_dim
    if square_n < 0 or square_n > r:
        raise ShapeError(f"square block dimension {square_n} outside [0, {r}]")
    increment = np.zeros(r)
    if init == INIT_RANDOM:
        if rng is None:
            raise ConfigurationError("random increment init needs a random stream")
        std = RANDOM_INIT_STD * float(np.mean(factors.s))
        increment = rng.normal(0.0, std, size=r)
    elif init != INIT_ZEROS:
        raise ConfigurationError(f"Unknown increment init: {init}")
    block = np.zeros((square_n, square_n)) if square_n else None
    logger.debug(f"Captured {w.shape} weight: r={r}, square_n={square_n}, init={init}")
    return LsiParams(base=w, factors=factors, increment=increment, square_block=block)


def reconstruct(p: LsiParams) -> Matrix:
    """
    U (diag(S + I') + K padded) V_h, evaluated as W + U diag(I') V_h + U_n K V_h,n.

    The residual form returns the original weight bit-for-bit when I'
    and K are zero.
    """
    u, v_h = p.factors.u, p.factors.v_h
    w = p.base + (u * p.increment) @ v_h
    if p.square_block is not None:
        n = p.square_n
        w = w + u[:, :n] @ p.square_block @ v_h[:n, :]
    if not np.all(np.isfinite(w)):
        raise DomainError("reconstructed weight is not finite")
    return w


def lsi_fake_quantize(p: LsiParams, cfg: QuantConfig) -> Matrix:
    """Fake-quantize the perturbed weight; qparams track I' and K."""
    return fake_quantize(reconstruct(p), cfg)


def fold(p: LsiParams, cfg: QuantConfig) -> QuantizedTensor:
    """Bake the increment into the weight and quantize it."""
    return quantize(reconstruct(p), cfg)


def trainable_count(p: LsiParams) -> int:
    return p.rank_dim + p.square_n * p.square_n


def trainable_fraction(p: LsiParams) -> float:
    rows, cols = p.shape
    return trainable_count(p) / float(rows * cols)


def check_budget(p: LsiParams, max_fraction: float) -> float:
    """
    Reject LSI parameter sets larger than max_fraction of the weight.

    Returns:
        The actual trainable fraction
    """
    fraction = trainable_fraction(p)
    if fraction > max_fraction:
        raise ConfigurationError(
            f"LSI trains {trainable_count(p)} values on a {p.shape} weight "
            f"({fraction:.4%}), above the {max_fraction:.4%} budget",
            hint="Reduce the square block dimension or raise lsi.max_trainable_fraction")
    return fraction


def grid_distance(w: Matrix, cfg: QuantConfig) -> float:
    """
    Mean distance from each weight to its nearest grid point, in steps.

    0 means every weight already sits on its quantization grid; 0.5 is
    the worst case for in-range weights.
    """
    w = np.asarray(w, dtype=np.float64)
    cfg.validate_for(w.shape)
    groups = group_view(w, cfg)
    lo, hi, *_ = clipped_range(groups, cfg.clip)
    s, z, _ = scale_zero(lo, hi, cfg.qmax)
    position = groups / s[:, None] + z[:, None]
    nearest = np.clip(np.rint(position), 0, cfg.qmax)
    return float(np.mean(np.abs(position - nearest)))
