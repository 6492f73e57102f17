import numpy as np
import pytest

from r3d.data import QuantileGrid
from r3d.errors import ValidationError
from r3d.inference import (InferenceReport, ResidualSet, bootstrap_bands, bootstrap_draws,
                           draw_multipliers, multiplier_loadings, multiplier_process,
                           multiplier_stream, process_loadings, residuals)
from r3d.inference import test_homogeneity as homogeneity
from r3d.inference import test_nullity as nullity
from r3d.kernels import KernelSpec, Side
from r3d.localpoly import EffectCurve
from r3d.pipeline import fit_arrays
from r3d.simulate import dgp1_arrays
from r3d.data import _batched_qf

TRI = KernelSpec.TRIANGULAR
DEC = QuantileGrid.deciles()


def toy_design(n=300, seed=0):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1, 1, n)
    qmat = np.sort(rng.normal(size=(n, 9)), axis=1) + xs[:, None]
    return xs, qmat


# ---------------------------------------------------------------- residuals

def test_exact_polynomial_residuals_vanish():
    xs = np.random.default_rng(1).uniform(-1, 1, 200)
    qmat = (1 + 2 * xs - xs ** 2)[:, None] + np.linspace(0, 1, 9)[None, :]
    res = residuals(xs, qmat, 0.7, 2, TRI)
    assert np.max(np.abs(res.e1)) <= 1e-6


def test_units_outside_window_have_zero_rows():
    xs, qmat = toy_design()
    res = residuals(xs, qmat, 0.3, 1, TRI)
    outside = np.abs(xs) > 0.3
    assert np.all(res.e1[outside] == 0)
    assert np.any(res.e1[~outside] != 0)


def test_sharp_design_treatment_residuals_zero():
    xs, qmat = toy_design()
    res = residuals(xs, qmat, 0.5, 2, TRI, ts=(xs >= 0).astype(float), h2=0.5)
    np.testing.assert_allclose(res.e2, 0, atol=1e-10)


def test_treatment_residuals_need_bandwidth():
    xs, qmat = toy_design()
    with pytest.raises(ValidationError):
        residuals(xs, qmat, 0.5, 2, TRI, ts=(xs >= 0).astype(float))


# ---------------------------------------------------------- multiplier process

def test_single_unit_hand_computed():
    # triangular, p=1, plus side: e0' Gamma^{-1} = (6, -12); at u=0.25 the
    # equivalent kernel is (6 - 3) * 0.75 = 2.25; residual 2, n=h=1, f0=0.5
    load = multiplier_loadings(np.array([0.25]), np.array([2.0]), 1.0, 1, TRI, 0.5, Side.PLUS)
    assert load[0, 0] == pytest.approx(2.25 * 2 / 0.5)


def test_process_zero_for_zero_multipliers_or_residuals():
    xs, qmat = toy_design()
    res = residuals(xs, qmat, 0.5, 2, TRI)
    assert np.all(multiplier_process(res, np.zeros(xs.size), 2, TRI, 0.5, 1, Side.PLUS) == 0)
    zero = res.scaled(0.0)
    xi = np.random.default_rng(2).standard_normal(xs.size)
    assert np.all(multiplier_process(zero, xi, 2, TRI, 0.5, 1, Side.MINUS) == 0)


def test_process_linear_in_multipliers():
    xs, qmat = toy_design()
    res = residuals(xs, qmat, 0.5, 2, TRI)
    xi = np.random.default_rng(3).standard_normal(xs.size)
    a = multiplier_process(res, xi, 2, TRI, 0.5, 1, Side.PLUS)
    np.testing.assert_allclose(multiplier_process(res, -2.5 * xi, 2, TRI, 0.5, 1, Side.PLUS),
                               -2.5 * a, rtol=1e-12, atol=1e-14)


def test_process_k2_needs_treatment():
    xs, qmat = toy_design()
    res = residuals(xs, qmat, 0.5, 2, TRI)
    with pytest.raises(ValidationError):
        multiplier_process(res, np.zeros(xs.size), 2, TRI, 0.5, 2, Side.PLUS)


def test_fuzzy_loadings_reduce_to_sharp():
    xs, qmat = toy_design()
    res = residuals(xs, qmat, 0.5, 2, TRI)
    sharp = process_loadings(res, 2, TRI, 0.5, 0.5)
    with_t = ResidualSet(res.xs, res.e1, res.h1, np.zeros(xs.size), 0.5)
    fuzzy = process_loadings(with_t, 2, TRI, 0.5, 0.5, tau_num=np.ones(9), jump=1.0)
    np.testing.assert_allclose(fuzzy, sharp, atol=1e-15)


# ---------------------------------------------------------------- multipliers

def test_streams_are_order_independent():
    a = draw_multipliers(11, 0, 10, 5)
    b = draw_multipliers(11, 5, 10, 5)
    np.testing.assert_array_equal(a[5:], b)
    np.testing.assert_array_equal(a[3], multiplier_stream(11, 3).standard_normal(5))
    assert not np.array_equal(draw_multipliers(12, 0, 1, 5), a[:1])


def test_bootstrap_draws_chunking_invariant():
    rng = np.random.default_rng(4)
    load = rng.normal(size=(20, 3))
    d = bootstrap_draws(load, 600, 5)
    np.testing.assert_allclose(d[300], multiplier_stream(5, 300).standard_normal(20) @ load)


# ---------------------------------------------------------------- sup tests

def test_nullity_zero_effect_p_one():
    eff = EffectCurve(DEC, np.zeros(9))
    draws = np.random.default_rng(5).normal(size=(200, 9))
    stat, p = nullity(eff, draws, 10.0)
    assert stat == 0 and p == 1.0


def test_nullity_extreme_stat():
    eff = EffectCurve(DEC, np.full(9, 100.0))
    draws = np.random.default_rng(6).normal(size=(200, 9))
    assert nullity(eff, draws, 10.0, add_one=False)[1] == 0.0
    assert nullity(eff, draws, 10.0)[1] == pytest.approx(1 / 201)


def test_homogeneity_constant_effect():
    eff = EffectCurve(DEC, np.full(9, 3.0))
    draws = np.random.default_rng(7).normal(size=(200, 9))
    stat, p = homogeneity(eff, draws, 10.0)
    assert stat == pytest.approx(0.0, abs=1e-12) and p == 1.0


def test_test_range_restricts_statistic():
    tau = np.zeros(9)
    tau[-1] = 5.0
    eff = EffectCurve(DEC, tau)
    draws = np.random.default_rng(8).normal(size=(200, 9))
    assert nullity(eff, draws, 1.0, q_range=(0.1, 0.8))[0] == 0.0
    with pytest.raises(ValidationError):
        nullity(eff, draws, 1.0, q_range=(0.05, 0.8))


# -------------------------------------------------------------------- bands

def _report(B=300, seed=0, factor=1.0, xs_q=None):
    xs, qmat = xs_q if xs_q is not None else toy_design()
    res = residuals(xs, qmat, 0.6, 2, TRI, project=True).scaled(factor)
    load = process_loadings(res, 2, TRI, 0.5, 0.6)
    eff = EffectCurve(DEC, np.linspace(0, 1, 9))
    return bootstrap_bands(eff, load, np.sqrt(xs.size * 0.6), B, 0.1, seed)


def test_band_contains_estimate_and_is_reproducible():
    r1, r2 = _report(seed=3), _report(seed=3)
    assert np.all(r1.band_low <= r1.effect.tau) and np.all(r1.effect.tau <= r1.band_high)
    np.testing.assert_array_equal(r1.band_low, r2.band_low)
    assert r1.p_nullity == r2.p_nullity and r1.critical_value == r2.critical_value


def test_doubling_residuals_doubles_critical_value():
    a, b = _report(factor=1.0), _report(factor=2.0)
    assert b.critical_value == pytest.approx(2 * a.critical_value, rel=1e-12)


def test_zero_process_gives_zero_width_band():
    r = _report(factor=0.0)
    np.testing.assert_array_equal(r.band_low, r.band_high)


def test_bootstrap_needs_enough_draws():
    with pytest.raises(ValidationError):
        _report(B=50)


def test_report_validation():
    eff = EffectCurve(DEC, np.zeros(9))
    with pytest.raises(ValidationError):
        InferenceReport(eff, np.ones(9), np.ones(9), 1.0, 0.5, 0.5, 100, 0.1, 0)
    with pytest.raises(ValidationError):
        InferenceReport(eff, None, None, None, 1.5, None, 0, 0.1, 0)


def test_band_narrows_with_sample_size():
    grid = DEC
    widths = {500: [], 2000: []}
    for seed in range(20):
        for n in widths:
            x, _, d = dgp1_arrays(n, 100, 2.0, np.random.default_rng(seed))
            rep = fit_arrays(x, _batched_qf(d, grid.points), grid, B=200, seed=seed,
                             coverage_correction=False)
            widths[n].append(float(np.mean(rep.band_high - rep.band_low)))
    assert np.median(widths[2000]) < np.median(widths[500])
