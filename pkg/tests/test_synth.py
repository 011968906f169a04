import math

import numpy as np
import pytest

from blindmap.channel import mean_matrix
from blindmap.errors import ConfigError
from blindmap.synth import (PPConfig, TrajConfig, aggregate_gain, beam_centers, default_eta, gen_csi,
                            gen_mimo, gen_scenario1, gen_scenario2, regenerate_series, report_top, route, visibility)
from blindmap.topology import Topology, distances

TC = TrajConfig(T=120, slot=0.5)


def test_scenario1_defaults_and_shape():
    topo, traj, series, truth = gen_scenario1(8, TC, PPConfig(), np.random.default_rng(0))
    assert len(topo) == 8 and series.T == 120
    assert series.mask.sum() == 120 * 8
    for pl in truth.pp.path_loss.values():
        assert (pl.alpha, pl.beta, pl.sigma) == (-20.0, 5.0, 0.5)
    assert all(b.omega == 0 for pats in truth.pp.patterns.values() for b in pats)


def test_scenario1_noiseless_equals_model():
    topo, traj, series, truth = gen_scenario1(4, TC, PPConfig(sigma=0.0), np.random.default_rng(1))
    mu = mean_matrix(truth.pp, topo, series.keys, traj.positions)
    np.testing.assert_array_equal(series.values, mu)


def test_scenario1_trajectory_dataset_one_velocity():
    _, traj, _, _ = gen_scenario1(3, TC, PPConfig(), np.random.default_rng(2))
    np.testing.assert_allclose(np.diff(traj.positions, axis=0), np.tile([5.0, 0.0], (119, 1)), atol=1e-9)


def test_scenario2_mean_station_count():
    tc = TrajConfig(T=200, slot=0.5)
    counts = []
    for s in range(30):
        topo, traj, series, _ = gen_scenario2(1.02e-3, 50.0, tc, PPConfig(), np.random.default_rng(s))
        counts.append(series.mask.sum(1).mean())
    # height offset 0 and a padded super-region: the disk around every slot is fully covered
    assert np.mean(counts) == pytest.approx(1.02e-3 * math.pi * 50 ** 2, rel=0.1)


def test_scenario2_masks_match_distance_filter():
    topo, traj, series, _ = gen_scenario2(2e-3, 40.0, TC, PPConfig(height_offset=3.0), np.random.default_rng(3))
    d = distances(traj.positions, topo.positions, topo.heights)
    np.testing.assert_array_equal(series.mask, d <= 40.0)


def test_large_radius_on_fixed_layout_hears_everyone():
    topo, traj, _, _ = gen_scenario1(5, TC, PPConfig(), np.random.default_rng(4))
    wide = Topology(topo.stations, topo.region, 1e9)
    assert visibility(wide, traj).all()
    assert visibility(topo, traj).all()


def test_mimo_sector_layout():
    topo, traj, series, truth = gen_mimo(3, 7, "sector", TC, PPConfig(), np.random.default_rng(5))
    assert series.values.shape == (120, 21)
    for q, pats in truth.pp.patterns.items():
        c = np.array([b.center for b in pats])
        span = np.ptp(np.unwrap(np.sort(c)))
        assert span == pytest.approx(2 * math.pi / 3 * 6 / 7, abs=1e-9) or span > math.pi
        assert pats[0].eta == pytest.approx(default_eta(2 * math.pi / 3, 7))


def test_mimo_single_beam_zero_omega_reduces_to_scenario():
    topo, traj, series, truth = gen_mimo(3, 1, "sector", TC, PPConfig(omega=0.0), np.random.default_rng(6))
    assert all(b.omega == 0 for pats in truth.pp.patterns.values() for b in pats)


def test_separable_layout_flat_aggregate():
    from blindmap.channel import BeamPattern
    cs = beam_centers(24, "separable", 0.0, 0.3)
    pats = [BeamPattern(10.0, 4.0, c) for c in cs]
    g = aggregate_gain(pats, np.linspace(0, 2 * math.pi, 20001))
    assert np.ptp(g) < 1e-3


def test_default_eta_half_power():
    eta = default_eta(2 * math.pi / 3, 7)
    w = 2 * math.pi / 3 / 7
    assert math.exp(-eta * (w / 2) ** 2) == pytest.approx(0.5)


def test_regeneration_bit_identical():
    for gen in (lambda r: gen_scenario1(4, TC, PPConfig(), r),
                lambda r: gen_scenario2(2e-3, 40.0, TC, PPConfig(), r),
                lambda r: gen_mimo(3, 4, "sector", TC, PPConfig(), r)):
        a = gen(np.random.default_rng(11))
        b = gen(np.random.default_rng(11))
        np.testing.assert_array_equal(a[2].values, b[2].values)
        np.testing.assert_array_equal(regenerate_series(a[3]).values, a[2].values)


def test_route_constant_speed_then_stop():
    tr = route(((0, 0), (10, 0), (10, 10)), 2.0, 1.0, 15)
    steps = np.linalg.norm(np.diff(tr.positions, axis=0), axis=1)
    np.testing.assert_allclose(steps[:10], 2.0)
    np.testing.assert_allclose(tr.positions[-1], [10, 10])


def test_report_top_keeps_strongest():
    topo, traj, series, _ = gen_mimo(2, 4, "sector", TC, PPConfig(), np.random.default_rng(7))
    top = report_top(series, 3)
    assert (top.mask.sum(1) == 3).all()
    for i in range(series.T):
        kept = top.values[i][top.mask[i]]
        dropped = series.values[i][~top.mask[i]]
        assert kept.min() >= dropped.max()


def test_gen_csi_shares_path_loss():
    topo, traj, series, truth = gen_mimo(2, 4, "sector", TC, PPConfig(), np.random.default_rng(8))
    csi = gen_csi(topo, truth.pp, 16, rng=np.random.default_rng(0))
    assert len(csi.topology.beam_keys()) == 32
    assert csi.pp.path_loss == truth.pp.path_loss
    assert csi.series(traj, np.random.default_rng(0), 0.5).values.shape == (120, 32)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrajConfig(T=1)
    with pytest.raises(ConfigError):
        PPConfig(sigma=-1)
    with pytest.raises(ConfigError):
        gen_scenario1(0)
    with pytest.raises(ConfigError):
        gen_scenario2(0.0, 10.0)
    with pytest.raises(ConfigError):
        beam_centers(3, "ring", 1.0, 0.0)
