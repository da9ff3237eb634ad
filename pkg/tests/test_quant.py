from __future__ import annotations

import numpy as np
import pytest

from qatlab.quant import (
    DitherDraw,
    GroupedWeights,
    QuantSpec,
    calibrate_step,
    dither_quantize,
    draw_dither,
    mean_field,
    mean_field_sensitivity,
    quantize,
    quantize_array,
)


def grouped(values, group_size=4):
    return GroupedWeights.from_flat(np.asarray(values, dtype=float), group_size)


def test_w2_midtread_rounds_inside_bin():
    spec = QuantSpec.w2(step=1.0)
    assert quantize(grouped([0.4]), spec) == pytest.approx([0.0])


def test_w2_midtread_clips_to_max_code():
    spec = QuantSpec.w2(step=1.0)
    assert quantize(grouped([3.7]), spec) == pytest.approx([1.0])


def test_ternary_matches_grid_enumeration():
    # Oracle: nearest point of the explicit grid {-0.5, 0, 0.5}.
    spec = QuantSpec.ternary(step=0.5)
    grid = np.array([-0.5, 0.0, 0.5])
    for w in (-0.6, -0.2, 0.1, 0.3, 0.74, -10.0):
        expected = grid[np.argmin(np.abs(grid - w))]
        assert quantize(grouped([w]), spec)[0] == pytest.approx(expected)
    assert quantize(grouped([-0.6]), spec)[0] == pytest.approx(-0.5)


def test_w1_is_pure_sign_with_positive_zero():
    spec = QuantSpec.w1(step=0.7)
    out = quantize(grouped([-0.3, 0.0, 2.0, -5.0]), spec)
    assert out == pytest.approx([-0.7, 0.7, 0.7, -0.7])


def test_mid_rise_w2_uses_four_half_step_levels():
    spec = QuantSpec.w2(step=1.0, mid_rise=True)
    out = quantize(grouped([-9.0, -0.7, 0.2, 0.8, 9.0]), spec)
    assert out == pytest.approx([-1.5, -0.5, 0.5, 0.5, 1.5])


def test_generic_bits_sets_clip_codes():
    spec = QuantSpec.generic(bits=4, step=0.25)
    assert spec.clip_codes == 7
    assert quantize(grouped([100.0]), spec)[0] == pytest.approx(7 * 0.25)


def test_round_half_away_from_zero():
    spec = QuantSpec.generic(bits=4, step=1.0)
    out = quantize(grouped([0.5, 1.5, 2.5, -0.5, -1.5]), spec)
    assert out == pytest.approx([1.0, 2.0, 3.0, -1.0, -2.0])


def test_non_finite_weight_rejected():
    spec = QuantSpec.w2(step=1.0)
    with pytest.raises(ValueError, match="non-finite weight"):
        quantize(grouped([np.nan]), spec)


def test_grid_membership_idempotence_monotonicity():
    rng = np.random.default_rng(7)
    for spec in (QuantSpec.w2(step=0.5), QuantSpec.generic(bits=3, step=0.3),
                 QuantSpec.w1(step=0.4), QuantSpec.w2(step=0.5, mid_rise=True),
                 QuantSpec.ternary(step=1.2)):
        w = np.sort(rng.uniform(-5, 5, size=257))
        q = quantize_array(w, spec)
        step = float(spec.step)
        if spec.mode == "w1":
            levels = {-step, step}
            assert set(np.round(q, 12)).issubset(levels)
        elif spec.mid_rise:
            codes = q / step - 0.5
            assert np.allclose(codes, np.round(codes))
            assert np.all(codes >= -spec.clip_codes - 1) and np.all(codes <= spec.clip_codes)
        else:
            codes = q / step
            assert np.allclose(codes, np.round(codes))
            assert np.all(np.abs(codes) <= spec.clip_codes + 1e-12)
        assert np.array_equal(quantize_array(q, spec), q)
        assert np.all(np.diff(q) >= 0)


def test_quantize_deterministic_bit_identical():
    spec = QuantSpec.generic(bits=3, step=0.37)
    w = grouped(np.random.default_rng(3).normal(size=64), group_size=16)
    a = quantize(w, spec)
    b = quantize(w, spec)
    assert np.array_equal(a, b)
    m1 = mean_field(w, spec, n_samples=500, seed=11)
    m2 = mean_field(w, spec, n_samples=500, seed=11)
    assert np.array_equal(m1, m2)


def test_dither_zero_reduces_to_quantize():
    spec = QuantSpec.w2(step=1.0)
    w = grouped([0.2, -0.8, 1.4])
    d = DitherDraw(r=np.zeros(3))
    assert np.array_equal(dither_quantize(w, d, spec), quantize(w, spec))


def test_dither_deep_saturation_returns_clip_minus_dither():
    spec = QuantSpec.w2(step=1.0)
    w = grouped([10.0, 10.0, 10.0])
    for seed in range(3):
        d = draw_dither(w, spec, seed=seed)
        assert dither_quantize(w, d, spec) == pytest.approx(1.0 - d.r)


def test_dither_out_of_range_rejected():
    spec = QuantSpec.w2(step=1.0)
    w = grouped([0.2, 0.3])
    with pytest.raises(ValueError, match="invalid dither"):
        dither_quantize(w, DitherDraw(r=np.array([0.0, 0.9])), spec)


def test_dither_draw_stays_in_half_step_interval():
    spec = QuantSpec.generic(bits=3, step=0.25)
    w = grouped(np.zeros(100), group_size=32)
    d = draw_dither(w, spec, seed=5)
    assert np.all(np.abs(d.r) <= 0.125)


def test_dither_interior_unbiasedness_within_mc_tolerance():
    # Interior coordinates (|w| <= (c-1)*step) are reproduced in mean.
    spec = QuantSpec.generic(bits=3, step=1.0)  # c = 3
    w_vals = np.array([-2.0, -1.3, -0.4, 0.0, 0.7, 1.9])
    w = grouped(w_vals, group_size=6)
    mean, sem = mean_field(w, spec, n_samples=10_000, seed=21, return_sem=True)
    assert np.all(np.abs(mean - w_vals) <= 4.0 * sem + 1e-12)


def test_mean_field_saturates_at_clip_level():
    spec = QuantSpec.w2(step=1.0)
    w = grouped([25.0, -25.0])
    mean, sem = mean_field(w, spec, n_samples=20_000, seed=3, return_sem=True)
    assert np.all(np.abs(mean - [1.0, -1.0]) <= 4.0 * sem + 1e-12)


def test_mean_field_zero_by_symmetry():
    spec = QuantSpec.w2(step=1.0)
    w = grouped([0.0])
    mean, sem = mean_field(w, spec, n_samples=20_000, seed=9, return_sem=True)
    assert abs(mean[0]) <= 4.0 * sem[0] + 1e-12


def test_sensitivity_interior_saturated_and_knee():
    spec = QuantSpec.w2(step=1.0)
    w = grouped([0.2, 5.0, 1.0])  # interior, deep saturation, clipping knee
    j, sem = mean_field_sensitivity(w, spec, n_samples=60_000, seed=13, return_sem=True)
    assert abs(j[0] - 1.0) <= 4.0 * sem[0]
    assert abs(j[1]) <= 4.0 * sem[1] + 1e-12
    # knee oracle: numeric integral of the dithered map around w = c*step
    eps = 0.01
    r = (np.arange(200_000) + 0.5) / 200_000 - 0.5  # midpoint rule over [-1/2, 1/2)
    m_hi = np.mean(quantize_array(1.0 + eps + r, spec) - r)
    m_lo = np.mean(quantize_array(1.0 - eps + r, spec) - r)
    knee_slope = (m_hi - m_lo) / (2 * eps)
    assert knee_slope == pytest.approx(0.5, abs=0.01)
    assert abs(j[2] - knee_slope) <= 4.0 * sem[2] + 0.02
    # large-sample MC confirmation of the knee value
    knee = GroupedWeights.from_flat(np.array([1.0]), group_size=1)
    j_mc, sem_mc = mean_field_sensitivity(knee, spec, n_samples=1_000_000, seed=29,
                                          return_sem=True)
    assert abs(j_mc[0] - 0.5) <= 4.0 * sem_mc[0]


def test_sensitivity_range_for_clipped_midtread():
    spec = QuantSpec.generic(bits=3, step=0.5)
    rng = np.random.default_rng(17)
    w = grouped(rng.uniform(-3, 3, size=48), group_size=16)
    j, sem = mean_field_sensitivity(w, spec, n_samples=20_000, seed=2, return_sem=True)
    tol = 4.0 * sem + 1e-9
    assert np.all(j >= -tol)
    assert np.all(j <= 1.0 + tol)


def test_identity_mode_passthrough():
    spec = QuantSpec.identity()
    w = grouped([0.123, -4.5, 6.7])
    assert np.array_equal(quantize(w, spec), w.values)
    j = mean_field_sensitivity(w, spec, n_samples=50, seed=0)
    assert j == pytest.approx([1.0, 1.0, 1.0])


def test_grouped_weights_validation():
    with pytest.raises(ValueError):
        GroupedWeights(values=np.zeros(4), group_bounds=((0, 2), (3, 4)))  # gap
    with pytest.raises(ValueError):
        GroupedWeights(values=np.zeros(4), group_bounds=((0, 2),))  # short cover
    w = GroupedWeights.from_flat(np.zeros(10), group_size=4)
    assert w.group_bounds == ((0, 4), (4, 8), (8, 10))
    assert w.n_groups == 3
    assert np.array_equal(w.group_index(), [0, 0, 0, 0, 1, 1, 1, 1, 2, 2])


def test_quant_spec_validation():
    with pytest.raises(ValueError):
        QuantSpec(step=-1.0)
    with pytest.raises(ValueError):
        QuantSpec(step=1.0, clip_codes=0)
    with pytest.raises(ValueError):
        QuantSpec(step=1.0, clip_codes=3, mode="w1_58")
    with pytest.raises(ValueError):
        QuantSpec.generic(bits=1)


def test_calibrate_step_per_group_maxabs():
    spec = QuantSpec.generic(bits=3, step=1.0)  # c = 3
    w = GroupedWeights.from_flat(np.array([0.3, -6.0, 1.5, 1.5]), group_size=2)
    cal = calibrate_step(w, spec)
    assert cal.per_group
    assert cal.step == pytest.approx([2.0, 0.5])
    q = quantize(w, cal)
    assert q[1] == pytest.approx(-6.0)  # peak is representable exactly
    assert q[2] == pytest.approx(1.5)


def test_per_group_step_dither_bounds():
    spec = QuantSpec.generic(bits=3, step=1.0)
    w = GroupedWeights.from_flat(np.array([0.3, -6.0, 1.5, 1.5]), group_size=2)
    cal = calibrate_step(w, spec)
    d = draw_dither(w, cal, seed=1)
    assert np.all(np.abs(d.r[:2]) <= 1.0)
    assert np.all(np.abs(d.r[2:]) <= 0.25)
    out = dither_quantize(w, d, cal)
    assert out.shape == (4,)
