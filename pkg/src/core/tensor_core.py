"""
Dense matrix foundation for lsiquant.

Matrices are 2-D float64 numpy arrays. Beyond the thin wrappers that
enforce shape and finiteness contracts, this module carries the one
piece of linear algebra the rest of the package depends on being
reproducible bit-for-bit: a one-sided Jacobi SVD with a fixed sweep
order.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

Matrix = np.ndarray
RandomStream = np.random.Generator

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
NULL_SINGULAR_RTOL = 1e-13


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD: w = u @ diag(s) @ v_h with r = min(rows, cols)."""

    u: Matrix
    s: np.ndarray
    v_h: Matrix

    @property
    def rank_dim(self) -> int:
        return int(self.s.shape[0])

    def reconstruct(self) -> Matrix:
        return (self.u * self.s) @ self.v_h


def as_matrix(data, name: str = "matrix") -> Matrix:
    """Validate and convert to a C-contiguous float64 matrix."""
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_mse(a: Matrix, b: Matrix) -> float:
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff))


def seeded_rng(seed: int) -> RandomStream:
    """Reproducible random stream (PCG64, platform independent)."""
    return np.random.Generator(np.random.PCG64(seed))


def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p_idx = np.array([p for p, _ in pairs], dtype=np.intp)
            q_idx = np.array([q for _, q in pairs], dtype=np.intp)
            rounds.append((p_idx, q_idx))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: Matrix, null_cols: Sequence[int]) -> Matrix:
    """Replace null columns of u with unit vectors orthogonal to the rest."""
    u = u.copy()
    rows = u.shape[0]
    accepted = [j for j in range(u.shape[1]) if j not in set(null_cols)]
    candidate = 0
    for j in null_cols:
        while candidate < rows:
            v = np.zeros(rows)
            v[candidate] = 1.0
            candidate += 1
            basis = u[:, accepted]
            for _ in range(2):
                v = v - basis @ (basis.T @ v)
            norm = np.linalg.norm(v)
            if norm > 0.5:
                u[:, j] = v / norm
                accepted.append(j)
                break
    return u


def _jacobi_tall(a: Matrix) -> Tuple[Matrix, np.ndarray, Matrix]:
    """One-sided Jacobi on a matrix with rows >= cols."""
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    schedule = _round_robin(n)
    sweeps = 0
    for sweeps in range(1, JACOBI_MAX_SWEEPS + 1):
        rotated = False
        for p, q in schedule:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        logger.warning(f"Jacobi SVD hit the {JACOBI_MAX_SWEEPS}-sweep cap")
    logger.debug(f"Jacobi SVD converged after {sweeps} sweeps on {a.shape}")

    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]

    floor = NULL_SINGULAR_RTOL * (sigma[0] if sigma.size else 0.0)
    null_cols = [j for j in range(n) if sigma[j] <= floor]
    u = np.zeros_like(a)
    live = [j for j in range(n) if j not in null_cols]
    u[:, live] = a[:, live] / sigma[live]
    if null_cols:
        u = _complete_basis(u, null_cols)
    return u, sigma, v


def svd(w: Matrix) -> SvdFactors:
    """
    Thin singular value decomposition by one-sided Jacobi rotations.

    Deterministic: the pair order is a fixed round-robin schedule and the
    largest-magnitude entry of every U column is made non-negative.

    Args:
        w: Finite matrix with at least one row and one column

    Returns:
        SvdFactors with descending non-negative singular values
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ShapeError(f"svd needs a non-empty 2-D matrix, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise DomainError("svd input contains non-finite entries")

    if w.shape[0] >= w.shape[1]:
        u, s, v = _jacobi_tall(w)
    else:
        # w = (w.T).T = (U' S V'^T)^T = V' S U'^T
        u_t, s, v_t = _jacobi_tall(w.T)
        u, v = v_t, u_t

    pivot = np.argmax(np.abs(u), axis=0)
    flip = np.where(u[pivot, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u = u * flip
    v_h = (v * flip).T
    return SvdFactors(u=np.ascontiguousarray(u), s=s,
                      v_h=np.ascontiguousarray(v_h))
