import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blindmap.channel import BeamPattern, MeasurementSeries, PathLossParams, PropagationParams
from blindmap.errors import DegenerateGamma, InsufficientData, InvalidCurvature, SingularDesign
from blindmap.estimators import (PatternFitConfig, QuadCoeffs, estimate_mobility, fit_beam_pattern,
                                 fit_path_loss_aggregate, fit_path_loss_residual, fit_propagation,
                                 fit_station, pattern_weights, propagation_loglik, wls_quadratic)
from blindmap.mobility import MobilityParams, Trajectory, simulate
from blindmap.synth import PPConfig, TrajConfig, beam_centers, gen_mimo, gen_scenario1, generate_series
from blindmap.topology import BaseStation, Topology


def test_quad_coeffs_to_pattern():
    bp = QuadCoeffs(-4.0, 8.0, math.log(10) - 4.0).to_pattern()
    assert (bp.omega, bp.eta, bp.center) == pytest.approx((10.0, 4.0, 1.0))


def test_quad_coeffs_invalid_curvature():
    with pytest.raises(InvalidCurvature):
        QuadCoeffs(0.5, 1.0, 0.0).to_pattern()


def test_estimate_mobility_constant_velocity():
    p = np.column_stack([np.arange(50) * 2.0, np.arange(50) * -1.0])
    v, s2 = estimate_mobility(Trajectory(p), 0.5, 0.5)
    np.testing.assert_allclose(v, [4.0, -2.0], atol=1e-9)
    assert s2 == pytest.approx(0.0, abs=1e-18)


def test_estimate_mobility_monte_carlo():
    g, delta, var = 0.8, 0.5, 2.0
    vbar = np.array([3.0, -1.0])
    mp = MobilityParams(tuple(vbar), var, g, delta)
    traj = simulate((0, 0), (1.5, -0.5), mp, 10_000, np.random.default_rng(0))
    v, s2 = estimate_mobility(traj, g, delta)
    # v_bar is the mean of residuals / ((1-g) delta): per-axis standard error below
    se = math.sqrt(mp.step_var / (len(traj) - 2)) / ((1 - g) * delta)
    assert np.all(np.abs(v - vbar) < 3 * se)
    assert s2 == pytest.approx(var, rel=0.05)


def test_estimate_mobility_errors():
    with pytest.raises(InsufficientData):
        estimate_mobility(np.zeros((2, 2)), 0.5, 0.5)
    with pytest.raises(DegenerateGamma):
        estimate_mobility(np.zeros((5, 2)), 1.0, 0.5)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
@settings(max_examples=30)
def test_estimate_mobility_translation_invariant(sx, sy):
    p = np.random.default_rng(1).normal(size=(40, 2)).cumsum(0)
    v0, s0 = estimate_mobility(p, 0.9, 0.5)
    v1, s1 = estimate_mobility(p + [sx, sy], 0.9, 0.5)
    np.testing.assert_allclose(v1, v0, atol=1e-6)
    assert s1 == pytest.approx(s0, rel=1e-6)


def _single_beam(sigma=0.0):
    tc = TrajConfig(T=200, slot=0.5)
    return gen_scenario1(4, tc, PPConfig(sigma=sigma, alpha_spread=5, beta_spread=3), np.random.default_rng(0))


def test_path_loss_aggregate_exact():
    topo, traj, series, truth = _single_beam()
    for q in topo.ids:
        a, b = fit_path_loss_aggregate(series, traj, topo, q)
        assert a == pytest.approx(truth.pp.path_loss[q].alpha, abs=1e-9)
        assert b == pytest.approx(truth.pp.path_loss[q].beta, abs=1e-9)


def test_path_loss_residual_exact_with_true_patterns():
    tc = TrajConfig(T=300, slot=0.5, waypoints=((0, 0), (100, 0), (100, 80)), speed=2.0)
    topo, traj, series, truth = gen_mimo(3, 4, "sector", tc, PPConfig(sigma=0.0), np.random.default_rng(1))
    for q in topo.ids:
        a, b, s = fit_path_loss_residual(series, traj, topo, q, truth.pp.patterns[q])
        assert a == pytest.approx(truth.pp.path_loss[q].alpha, abs=1e-8)
        assert b == pytest.approx(truth.pp.path_loss[q].beta, abs=1e-8)
        assert s < 1e-8


def test_path_loss_singular_design():
    topo = Topology((BaseStation(0, (0, 0)),), (-5, -5, 5, 5))
    series = MeasurementSeries(0.5, [(0, 0)], np.full((5, 1), -10.0))
    with pytest.raises(SingularDesign):
        fit_path_loss_aggregate(series, np.tile([3.0, 4.0], (5, 1)), topo, 0)


def test_stacked_equals_aggregated_regression(rng):
    # regressing every beam on the shared log-distance equals regressing the beam mean
    T, M = 60, 5
    ld = rng.uniform(0.5, 2.5, T)
    Y = rng.normal(size=(T, M)) + ld[:, None] * -20.0
    D = np.column_stack([ld, np.ones(T)])
    stacked = np.linalg.lstsq(np.kron(np.ones((M, 1)), D), Y.T.reshape(-1), rcond=None)[0]
    agg = np.linalg.lstsq(D, Y.mean(1), rcond=None)[0]
    np.testing.assert_allclose(stacked, agg, atol=1e-10)


def test_fit_beam_pattern_noiseless():
    phi = np.linspace(0.2, 1.8, 80)
    y = 10.0 * np.exp(-4.0 * (phi - 1.0) ** 2)
    assert (y > 0.01).all()
    w, e, c = fit_beam_pattern(y, phi, PatternFitConfig(tol=1e-12, max_iters=200))
    assert (w, e, c) == pytest.approx((10.0, 4.0, 1.0), abs=1e-6)


def test_fit_beam_pattern_wraps_across_zero():
    phi = np.mod(np.linspace(-0.6, 0.6, 50), 2 * math.pi)
    y = 5.0 * np.exp(-3.0 * np.remainder(phi - 0.1, 2 * math.pi) ** 2)
    y = 5.0 * np.exp(-3.0 * (np.mod(phi - 0.1 + math.pi, 2 * math.pi) - math.pi) ** 2)
    w, e, c = fit_beam_pattern(y, phi, PatternFitConfig(tol=1e-12, max_iters=200))
    assert (w, e) == pytest.approx((5.0, 3.0), abs=1e-6)
    assert c == pytest.approx(0.1, abs=1e-6)


def test_fit_beam_pattern_insufficient():
    with pytest.raises(InsufficientData):
        fit_beam_pattern([1.0, 2.0], [0.1, 0.2])
    with pytest.raises(InsufficientData):
        fit_beam_pattern([0.001, 0.002, 0.003, 0.004], [0.1, 0.2, 0.3, 0.4])


def test_pattern_weights_limit():
    B = np.array([2.0, 3.0])
    np.testing.assert_allclose(pattern_weights(B, B), B ** 2)
    y = np.array([2.5, 1.0])
    expect = B * (y - B) / (np.log(y) - np.log(B))
    np.testing.assert_allclose(pattern_weights(y, B), expect, rtol=1e-12)


@given(st.floats(0.02, 50), st.floats(0.02, 50))
def test_pattern_weights_positive_and_continuous(y, b):
    w = pattern_weights(np.array([y]), np.array([b]))[0]
    assert w > 0
    near = pattern_weights(np.array([b * (1 + 1e-9)]), np.array([b]))[0]
    assert near == pytest.approx(b * b, rel=1e-6)


def test_wls_rank_deficient():
    with pytest.raises(SingularDesign):
        wls_quadratic(np.array([0.1, 0.1, 0.1]), np.zeros(3), np.ones(3))


def test_fit_propagation_single_beam_reduces_to_path_loss():
    topo, traj, series, truth = _single_beam(0.3)
    pp = fit_propagation(series, traj, topo)
    for q in topo.ids:
        a, b = fit_path_loss_aggregate(series, traj, topo, q)
        assert pp.path_loss[q].alpha == pytest.approx(a, abs=1e-9)
        assert pp.path_loss[q].beta == pytest.approx(b, abs=1e-9)
        assert all(bp.omega == 0.0 for bp in pp.patterns[q])


def test_fit_propagation_separable_layout_recovers_parameters():
    tc = TrajConfig(T=2000, slot=0.5, waypoints=((0, 0), (200, 0), (200, 150), (0, 150), (0, 10)), speed=1.5)
    pc = PPConfig(sigma=0.1, omega=10.0, eta=4.0, alpha=-30.0, beta=20.0, pad=40.0)
    pos = ((100, 75), (60, 50), (140, 95))
    topo, traj, series, truth = gen_mimo(3, 8, "separable", tc, pc, np.random.default_rng(2), positions=pos)
    pp = fit_propagation(series, traj, topo, PatternFitConfig(tol=1e-9))
    for q in topo.ids:
        t, f = truth.pp.path_loss[q], pp.path_loss[q]
        assert f.alpha == pytest.approx(t.alpha, rel=0.01)
        assert f.beta == pytest.approx(t.beta, rel=0.01)
        assert f.sigma == pytest.approx(t.sigma, rel=0.05)
        for tb, fb in zip(truth.pp.patterns[q], pp.patterns[q]):
            assert fb.omega == pytest.approx(tb.omega, rel=0.01)
            assert fb.eta == pytest.approx(tb.eta, rel=0.01)
            assert abs(math.remainder(fb.center - tb.center, 2 * math.pi)) < 0.01


def test_fit_station_trace_non_decreasing():
    tc = TrajConfig(T=600, slot=0.5, waypoints=((0, 0), (150, 0), (150, 100)), speed=1.5)
    topo, traj, series, truth = gen_mimo(2, 5, "sector", tc, PPConfig(sigma=0.5), np.random.default_rng(3))
    for q in topo.ids:
        trace = []
        fit_station(series, traj, topo, q, PatternFitConfig(), trace=trace)
        assert len(trace) >= 1
        assert np.all(np.diff(trace) >= -1e-9)


def test_pattern_stage_improves_on_path_loss_only():
    tc = TrajConfig(T=400, slot=0.5, waypoints=((0, 0), (150, 0), (150, 100)), speed=1.5)
    topo, traj, series, truth = gen_mimo(2, 3, "sector", tc, PPConfig(sigma=0.5), np.random.default_rng(4))
    full = fit_propagation(series, traj, topo)
    plain = fit_propagation(series, traj, topo, PatternFitConfig(fit_patterns=False))
    assert propagation_loglik(series, traj, full, topo) > propagation_loglik(series, traj, plain, topo)
