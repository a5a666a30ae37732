#!/usr/bin/env python3
"""Tests for uniform affine quantization"""

import numpy as np
import pytest

from src.core.calib_trainer import NEUTRAL_CLIP_LOGIT
from src.core.errors import ConfigurationError, DomainError, ShapeError
from src.core.ops import ActQuant, Ctx
from src.core.quantizer import (ACTIVATION, GROUP, PER_CHANNEL, PER_TENSOR, ClipLogits,
                                QuantConfig, compute_qparams, dequantize, fake_quantize,
                                group_view, quantize, quantize_activation, sigmoid,
                                snap_scale, ungroup)
from src.core.tensor_core import frobenius_mse, seeded_rng


def test_config_validation():
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=1)
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=9)
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=4, granularity=PER_TENSOR)
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=4, granularity=GROUP)
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=8, granularity=PER_CHANNEL, target=ACTIVATION)
    assert QuantConfig(bits=16, granularity=PER_TENSOR, target=ACTIVATION).qmax == 65535
    assert QuantConfig(bits=3).label == "w3"
    assert QuantConfig(bits=2, granularity=GROUP, group_size=16).label == "w2g16"


def test_group_view_is_column_major():
    w = np.arange(8.0).reshape(4, 2)
    cfg = QuantConfig(bits=4, granularity=GROUP, group_size=2)
    groups = group_view(w, cfg)
    # column 0 rows 0-1, column 0 rows 2-3, column 1 rows 0-1, column 1 rows 2-3
    assert groups.tolist() == [[0.0, 2.0], [4.0, 6.0], [1.0, 3.0], [5.0, 7.0]]
    assert np.array_equal(ungroup(groups, w.shape, cfg), w)
    assert cfg.n_groups(w.shape) == 4
    assert np.array_equal(group_view(w, QuantConfig(bits=4)), w.T)


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
@pytest.mark.parametrize("group_size", [0, 4])
def test_quantize_error_bound(bits, group_size, matrix_factory):
    w = matrix_factory(16, 6)
    cfg = (QuantConfig(bits=bits, granularity=GROUP, group_size=group_size) if group_size
           else QuantConfig(bits=bits))
    q = quantize(w, cfg)
    assert q.codes.dtype == np.int64
    assert q.codes.min() >= 0 and q.codes.max() <= cfg.qmax
    assert q.scale.shape == (cfg.n_groups(w.shape),)

    err = np.abs(group_view(dequantize(q) - w, cfg))
    assert np.all(err <= 0.51 * q.scale[:, None])


def test_fake_quantize_is_idempotent(matrix_factory):
    for cfg in (QuantConfig(bits=3), QuantConfig(bits=2, granularity=GROUP, group_size=8)):
        w = matrix_factory(32, 5)
        once = fake_quantize(w, cfg)
        assert np.array_equal(fake_quantize(once, cfg), once)
        assert np.array_equal(quantize(once, cfg).codes, quantize(w, cfg).codes)


def test_snapped_scales_have_short_mantissas(rng):
    s = snap_scale(rng.random(100) + 1e-3)
    mantissa, _ = np.frexp(s)
    assert np.array_equal(np.ldexp(mantissa, 40), np.floor(np.ldexp(mantissa, 40)))


@pytest.mark.parametrize("value", [3.0, -2.0, 0.0])
def test_constant_groups_round_trip_exactly(value):
    w = np.full((4, 3), value)
    w[:, 1] = np.linspace(-1.0, 1.0, 4)
    out = fake_quantize(w, QuantConfig(bits=2))
    assert np.array_equal(out[:, 0], w[:, 0])
    assert np.array_equal(out[:, 2], w[:, 2])


def test_compute_qparams_matches_quantize(matrix_factory):
    w = matrix_factory(8, 3)
    cfg = QuantConfig(bits=4)
    q = quantize(w, cfg)
    for j in range(3):
        s, z = compute_qparams(w[:, j], cfg, group_index=j)
        assert s == q.scale[j]
        assert z == q.zero_point[j]
    with pytest.raises(DomainError):
        compute_qparams(np.array([]), cfg)


def test_clipping_shrinks_the_range(matrix_factory):
    w = matrix_factory(16, 4)
    plain = QuantConfig(bits=4)
    clipped = plain.with_clip(ClipLogits(gamma=np.zeros(4), beta=np.zeros(4)))
    # sigmoid(0) halves both ends of the range
    assert np.allclose(quantize(w, clipped).scale, 0.5 * quantize(w, plain).scale, rtol=1e-9)
    assert sigmoid(np.array([40.0]))[0] == 1.0


def test_quantize_rejects_bad_input():
    with pytest.raises(ShapeError):
        quantize(np.zeros((6, 2)), QuantConfig(bits=4, granularity=GROUP, group_size=4))
    with pytest.raises(DomainError):
        quantize(np.array([[np.nan, 1.0]]), QuantConfig(bits=4))
    with pytest.raises(ShapeError):
        quantize(np.zeros((3, 2)), QuantConfig(bits=4).with_clip(ClipLogits.initial(5)))


def test_activation_quantization_per_sequence(rng):
    x = np.vstack([rng.standard_normal((4, 3)), 100.0 * rng.standard_normal((4, 3))])
    assert quantize_activation(x, 16) is x

    per_seq = quantize_activation(x, 8, seq_len=4)
    whole = quantize_activation(x, 8)
    # The small-magnitude sequence keeps its own scale
    assert np.max(np.abs(per_seq[:4] - x[:4])) < np.max(np.abs(whole[:4] - x[:4]))
    with pytest.raises(ShapeError):
        quantize_activation(x, 8, seq_len=3)


def test_activation_quantization_defaults_to_one_scale(rng):
    x = np.vstack([rng.standard_normal((4, 3)), 100.0 * rng.standard_normal((4, 3))])
    whole = ActQuant.forward(Ctx(), x, 8)
    assert np.array_equal(whole, quantize_activation(x, 8))
    assert np.array_equal(ActQuant.forward(Ctx(), x, 8, seq_len=4),
                          quantize_activation(x, 8, seq_len=4))
    # A single scale leaves the small sequence on the coarse grid
    assert not np.array_equal(whole, quantize_activation(x, 8, seq_len=4))


def test_error_never_grows_with_bits():
    for seed in range(100):
        w = seeded_rng(seed).standard_normal((64, 4))
        errors = [frobenius_mse(fake_quantize(w, QuantConfig(bits=k)), w) for k in range(2, 9)]
        assert all(a >= b for a, b in zip(errors, errors[1:])), (seed, errors)


@pytest.mark.parametrize("group_size", [0, 4])
def test_two_bit_codes_are_the_nearest_grid_point(group_size, matrix_factory):
    cfg = (QuantConfig(bits=2, granularity=GROUP, group_size=group_size) if group_size
           else QuantConfig(bits=2))
    for _ in range(20):
        w = matrix_factory(16, 3)
        q = quantize(w, cfg)
        groups = group_view(w, cfg)
        lo, hi = groups.min(axis=1), groups.max(axis=1)
        assert np.allclose(q.scale, (hi - lo) / 3, rtol=1e-11, atol=0)
        assert np.array_equal(q.zero_point, np.rint(-lo / q.scale))

        # every code in {0, 1, 2, 3}, scored against every value
        grid = (np.arange(4)[None, :] - q.zero_point[:, None]) * q.scale[:, None]
        dist = np.abs(groups[:, :, None] - grid[:, None, :])
        nearest = np.argmin(dist, axis=2)
        assert np.array_equal(group_view(q.codes.astype(np.float64), cfg), nearest)
        chosen = np.take_along_axis(grid, nearest, axis=1)
        assert np.array_equal(group_view(dequantize(q), cfg), chosen)


def test_neutral_clip_is_bit_exact_rtn(matrix_factory):
    for cfg in (QuantConfig(bits=3), QuantConfig(bits=2, granularity=GROUP, group_size=8)):
        w = matrix_factory(32, 5)
        n = cfg.n_groups(w.shape)
        clipped = cfg.with_clip(ClipLogits.initial(n, NEUTRAL_CLIP_LOGIT))
        plain, neutral = quantize(w, cfg), quantize(w, clipped)
        assert np.array_equal(neutral.codes, plain.codes)
        assert np.array_equal(neutral.scale, plain.scale)
        assert np.array_equal(neutral.zero_point, plain.zero_point)
        assert np.array_equal(fake_quantize(w, clipped), fake_quantize(w, cfg))


def test_groups_are_quantized_independently(matrix_factory):
    cfg = QuantConfig(bits=3, granularity=GROUP, group_size=4)
    w = matrix_factory(16, 3)
    changed = w.copy()
    changed[0:4, 1] *= 50.0
    before, after = quantize(w, cfg), quantize(changed, cfg)
    # column 1 rows 0-3 is group 4 in column-major order
    touched = 4
    others = np.arange(cfg.n_groups(w.shape)) != touched
    assert np.array_equal(before.scale[others], after.scale[others])
    assert np.array_equal(before.zero_point[others], after.zero_point[others])
    keep = np.ones(w.shape, dtype=bool)
    keep[0:4, 1] = False
    assert np.array_equal(before.codes[keep], after.codes[keep])
    assert before.scale[touched] != after.scale[touched]


def test_integer_range_maps_onto_codes():
    values = np.arange(16.0)
    w = np.stack([values, values[::-1]], axis=1)
    q = quantize(w, QuantConfig(bits=4))
    assert np.array_equal(q.scale, [1.0, 1.0])
    assert np.array_equal(q.zero_point, [0.0, 0.0])
    assert np.array_equal(q.codes, w.astype(np.int64))
    assert np.array_equal(dequantize(q), w)


def test_symmetric_unit_range_at_eight_bits():
    w = np.linspace(-1.0, 1.0, 9).reshape(-1, 1)
    q = quantize(w, QuantConfig(bits=8))
    s = q.scale[0]
    # snapped to a 40-bit mantissa, never above the exact step
    assert s == pytest.approx(2.0 / 255, rel=2.0 ** -39, abs=0)
    assert s <= 2.0 / 255
    assert q.zero_point[0] == 128
    assert q.codes[0, 0] == 0 and q.codes[-1, 0] == 255
