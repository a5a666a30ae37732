"""Shared fixtures for the lsiquant test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from src.core.tensor_core import seeded_rng
from src.core.toy_model import ModelSpec, make_synthetic_data, make_synthetic_model

# Per-channel increments fit the 5% budget at this width (r / (rows * cols) = 1 / 32).
TINY_SPEC = dict(n_layers=2, width=32, n_heads=4, vocab=64, seq_len=8)


@pytest.fixture
def rng():
    return seeded_rng(1234)


@pytest.fixture
def tiny_spec():
    return ModelSpec(**TINY_SPEC)


@pytest.fixture
def tiny_model(tiny_spec):
    return make_synthetic_model(tiny_spec, seed=3)


@pytest.fixture
def tiny_calib(tiny_spec):
    return make_synthetic_data(tiny_spec, seed=5, n_samples=6)


def random_matrix(rng, rows, cols, scale=1.0):
    return scale * rng.standard_normal((rows, cols))


@pytest.fixture
def matrix_factory(rng):
    def make(rows, cols, scale=1.0):
        return random_matrix(rng, rows, cols, scale)
    return make

