#!/usr/bin/env python3
"""Tests for the dense matrix layer and the Jacobi SVD"""

import numpy as np
import pytest

from src.core.errors import DomainError, ShapeError
from src.core.tensor_core import as_matrix, frobenius_mse, matmul, seeded_rng, svd


def _svd_cases(n_cases=200, max_dim=64, seed=11):
    rng = seeded_rng(seed)
    for i in range(n_cases):
        rows, cols = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
        w = rng.standard_normal((rows, cols))
        if i % 4 == 0 and min(rows, cols) > 1:
            # Rank deficient: product of thin factors
            rank = int(rng.integers(1, min(rows, cols)))
            w = rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))
        yield w


def test_svd_contract_on_random_shapes():
    """Reconstruction, orthogonality and eigenvalue oracle on tall, wide and rank-deficient inputs"""
    for w in _svd_cases():
        f = svd(w)
        r = min(w.shape)
        assert f.u.shape == (w.shape[0], r)
        assert f.v_h.shape == (r, w.shape[1])
        assert np.all(np.diff(f.s) <= 0.0)
        assert np.all(f.s >= 0.0)

        rel = np.linalg.norm(f.reconstruct() - w) / max(np.linalg.norm(w), 1e-300)
        assert rel < 1e-6

        assert np.max(np.abs(f.u.T @ f.u - np.eye(r))) < 1e-8
        assert np.max(np.abs(f.v_h @ f.v_h.T - np.eye(r))) < 1e-8

        gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
        eig = np.sort(np.linalg.eigvalsh(gram))[::-1]
        scale = max(1.0, float(eig[0]))
        assert np.max(np.abs(f.s ** 2 - eig)) < 1e-8 * scale


def test_svd_is_deterministic_and_sign_fixed(matrix_factory):
    w = matrix_factory(12, 7)
    a, b = svd(w), svd(w.copy())
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(a.s, b.s)
    assert np.array_equal(a.v_h, b.v_h)

    pivots = np.argmax(np.abs(a.u), axis=0)
    assert np.all(a.u[pivots, np.arange(a.u.shape[1])] >= 0.0)


def test_svd_zero_matrix_has_orthonormal_factors():
    f = svd(np.zeros((5, 3)))
    assert np.all(f.s == 0.0)
    assert np.max(np.abs(f.u.T @ f.u - np.eye(3))) < 1e-12
    assert np.array_equal(f.reconstruct(), np.zeros((5, 3)))


def test_svd_single_entry():
    f = svd(np.array([[-3.0]]))
    assert f.s[0] == 3.0
    assert f.reconstruct()[0, 0] == pytest.approx(-3.0)


def test_svd_rejects_bad_input():
    with pytest.raises(ShapeError):
        svd(np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        svd(np.zeros(4))
    with pytest.raises(DomainError):
        svd(np.array([[1.0, np.nan]]))


def test_as_matrix_contracts():
    m = as_matrix([[1, 2], [3, 4]])
    assert m.dtype == np.float64
    assert m.flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(DomainError):
        as_matrix([[np.inf]])


def test_matmul_and_mse_shape_checks(matrix_factory):
    a, b = matrix_factory(3, 4), matrix_factory(4, 2)
    assert np.array_equal(matmul(a, b), a @ b)
    with pytest.raises(ShapeError):
        matmul(a, a)
    assert frobenius_mse(a, a) == 0.0
    assert frobenius_mse(np.zeros((1, 2)), np.array([[1.0, 3.0]])) == 5.0
    with pytest.raises(ShapeError):
        frobenius_mse(a, b)


def test_seeded_rng_is_reproducible():
    assert np.array_equal(seeded_rng(7).standard_normal(5), seeded_rng(7).standard_normal(5))
    assert not np.array_equal(seeded_rng(7).standard_normal(5), seeded_rng(8).standard_normal(5))


def test_singular_values_match_a_reference_decomposition():
    for w in _svd_cases(n_cases=100, seed=23):
        reference = np.linalg.svd(w, compute_uv=False)
        assert np.max(np.abs(svd(w).s - reference)) < 1e-10


def _naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (7, 4, 9)])
def test_matmul_matches_the_triple_loop(shape, matrix_factory):
    n, k, m = shape
    a, b = matrix_factory(n, k), matrix_factory(k, m)
    assert np.allclose(matmul(a, b), _naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_is_associative(matrix_factory):
    a, b, c = matrix_factory(6, 5), matrix_factory(5, 4), matrix_factory(4, 3)
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.allclose(left, right, rtol=1e-10, atol=1e-12)


def test_seeded_rng_draws_are_centred():
    for seed in (0, 1, 2):
        stream = seeded_rng(seed)
        assert abs(stream.standard_normal(100_000).mean()) < 0.02
        assert abs(stream.random(100_000).mean() - 0.5) < 0.01
