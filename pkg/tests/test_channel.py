import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blindmap.channel import (BeamPattern, MeasurementSeries, Observation, PathLossParams, PropagationParams,
                              angle_diff, emission_loglik, log_likelihood_obs, mean_matrix, mean_rsrp_db,
                              sample_observation)
from blindmap.errors import CoincidentPoint, ConfigError
from blindmap.topology import BaseStation, Topology


def _setup(alpha=-20.0, beta=5.0, sigma=1.0, omega=0.0, eta=0.0, center=0.0, pos=(0, 0), h=0.0):
    topo = Topology((BaseStation(0, pos, 1, h),), (-100, -100, 100, 100))
    pp = PropagationParams({0: PathLossParams(alpha, beta, sigma)}, {0: [BeamPattern(omega, eta, center)]})
    return topo, pp


def _random_setup(rng, Q=3, M=2):
    st_ = tuple(BaseStation(q, tuple(rng.uniform(-50, 50, 2)), M, float(rng.uniform(0, 10))) for q in range(Q))
    topo = Topology(st_, (-60, -60, 60, 60))
    pl = {q: PathLossParams(rng.uniform(-40, -10), rng.uniform(0, 10), rng.uniform(0.2, 2)) for q in range(Q)}
    pat = {q: [BeamPattern(rng.uniform(0, 20), rng.uniform(0.5, 8), rng.uniform(0, 2 * math.pi))
               for _ in range(M)] for q in range(Q)}
    return topo, PropagationParams(pl, pat)


def test_angle_diff_examples():
    assert angle_diff(0.1, 0.2) == pytest.approx(-0.1)
    assert angle_diff(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
    assert angle_diff(math.pi, 0.0) == pytest.approx(math.pi)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_angle_diff_range(a, b):
    d = angle_diff(a, b)
    assert -math.pi < d <= math.pi + 1e-12
    assert math.cos(d) == pytest.approx(math.cos(a - b), abs=1e-9)


def test_mean_rsrp_examples():
    topo, pp = _setup()
    assert mean_rsrp_db(pp, 0, 0, (10, 0), topo) == pytest.approx(-15.0)
    topo, pp = _setup(omega=10.0, eta=3.0, center=0.0)
    assert mean_rsrp_db(pp, 0, 0, (10, 0), topo) == pytest.approx(-5.0)
    c = 0.5
    topo, pp = _setup(omega=10.0, eta=4.0, center=c)
    got = mean_rsrp_db(pp, 0, 0, (10, 0), topo) - (-15.0)
    assert got == pytest.approx(10 * math.exp(-1.0))
    assert got == pytest.approx(3.6788, abs=1e-4)


def test_mean_rsrp_coincident_raises():
    topo, pp = _setup()
    with pytest.raises(CoincidentPoint):
        mean_rsrp_db(pp, 0, 0, (0, 0), topo)


def test_sample_observation_noiseless(rng):
    topo, pp = _setup(sigma=1e-300, omega=5.0, eta=2.0, center=1.0)
    obs = sample_observation(pp, topo, (3, 7), [(0, 0)], rng)
    assert obs.entries[(0, 0)] == pytest.approx(mean_rsrp_db(pp, 0, 0, (3, 7), topo), abs=1e-12)


def test_sample_observation_shares_noise_per_station(rng):
    topo, pp = _random_setup(rng)
    x = (5.0, 5.0)
    obs = sample_observation(pp, topo, x, topo.beam_keys(), rng)
    for q in topo.ids:
        r = [obs.entries[(q, m)] - mean_rsrp_db(pp, q, m, x, topo) for m in range(2)]
        assert r[0] == pytest.approx(r[1], abs=1e-12)


def test_loglik_examples():
    topo, pp = _setup(sigma=0.7)
    x = (4, 3)
    mu = mean_rsrp_db(pp, 0, 0, x, topo)
    obs = Observation(1, {(0, 0): mu})
    assert log_likelihood_obs(obs, x, pp, topo) == pytest.approx(-math.log(math.sqrt(2 * math.pi) * 0.7))
    assert log_likelihood_obs(Observation(1, {}), x, pp, topo) == 0.0


def test_loglik_zero_residual_n_beams(rng):
    topo = Topology((BaseStation(0, (0, 0), 3),), (-10, -10, 10, 10))
    pp = PropagationParams({0: PathLossParams(-20, 5, 0.4)},
                           {0: [BeamPattern(3.0, 1.0, c) for c in (0.0, 1.0, 2.0)]})
    x = (2, 5)
    obs = Observation(1, {(0, m): mean_rsrp_db(pp, 0, m, x, topo) for m in range(3)})
    assert log_likelihood_obs(obs, x, pp, topo) == pytest.approx(-3 * math.log(math.sqrt(2 * math.pi) * 0.4))


def test_loglik_matches_term_oracle(rng):
    for _ in range(20):
        topo, pp = _random_setup(rng)
        x = rng.uniform(-50, 50, 2)
        keys = [k for k in topo.beam_keys() if rng.random() < 0.7]
        obs = Observation(1, {k: float(rng.normal(-40, 10)) for k in keys})
        oracle = 0.0
        for (q, m), y in obs.entries.items():
            bs = topo.station(q)
            d = math.sqrt((x[0] - bs.position[0]) ** 2 + (x[1] - bs.position[1]) ** 2 + bs.height_offset ** 2)
            phi = math.atan2(x[1] - bs.position[1], x[0] - bs.position[0])
            b = pp.patterns[q][m]
            u = math.remainder(phi - b.center, 2 * math.pi)
            mu = pp.path_loss[q].beta + pp.path_loss[q].alpha * math.log10(d) + b.omega * math.exp(-b.eta * u * u)
            s = pp.path_loss[q].sigma
            oracle += -0.5 * math.log(2 * math.pi * s * s) - (y - mu) ** 2 / (2 * s * s)
        assert log_likelihood_obs(obs, x, pp, topo) == pytest.approx(oracle, rel=1e-12, abs=1e-12)


def test_emission_loglik_matches_per_slot(rng):
    topo, pp = _random_setup(rng)
    vals = rng.normal(-40, 5, size=(6, len(topo.beam_keys())))
    vals[rng.random(vals.shape) < 0.3] = np.nan
    series = MeasurementSeries(0.5, topo.beam_keys(), vals)
    pts = rng.uniform(-50, 50, size=(7, 2))
    E = emission_loglik(series, pp, topo, pts)
    for i in range(series.T):
        obs = series.observation(i)
        for j, x in enumerate(pts):
            assert E[i, j] == pytest.approx(log_likelihood_obs(obs, x, pp, topo), rel=1e-9, abs=1e-8)


def test_mean_matrix_matches_scalar(rng):
    topo, pp = _random_setup(rng)
    pts = rng.uniform(-50, 50, size=(5, 2))
    keys = topo.beam_keys()
    M = mean_matrix(pp, topo, keys, pts)
    for i, x in enumerate(pts):
        for j, (q, m) in enumerate(keys):
            assert M[i, j] == pytest.approx(mean_rsrp_db(pp, q, m, x, topo), abs=1e-10)


def test_series_roundtrip_observations(rng):
    obs = [Observation(1, {(0, 0): -3.0}), Observation(2, {(1, 0): -4.0, (0, 0): -1.0})]
    s = MeasurementSeries.from_observations(obs, 0.5)
    assert s.keys == [(0, 0), (1, 0)]
    assert s.observations() == obs
    assert s.mask.sum() == 3


def test_series_validation():
    with pytest.raises(ConfigError):
        MeasurementSeries.from_observations([Observation(2), Observation(2)], 0.5)
    with pytest.raises(ConfigError):
        MeasurementSeries(0.5, [(0, 0), (0, 0)], np.zeros((1, 2)))
    with pytest.raises(ConfigError):
        PathLossParams(-20, 5, 0.0)
    with pytest.raises(ConfigError):
        BeamPattern(1.0, -1.0, 0.0)


def test_params_dict_roundtrip(rng):
    _, pp = _random_setup(rng)
    back = PropagationParams.from_dict(pp.to_dict())
    assert back.path_loss == pp.path_loss and back.patterns == pp.patterns


xy = st.tuples(st.floats(-50, 50), st.floats(-50, 50))


@settings(max_examples=60)
@given(xy, xy, xy, st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
def test_mean_rsrp_translation_rotation_invariant(x, o, shift, theta, c):
    if math.hypot(x[0] - o[0], x[1] - o[1]) < 1e-3:
        return
    topo, pp = _setup(omega=8.0, eta=2.0, center=c, pos=o, h=3.0)
    base = mean_rsrp_db(pp, 0, 0, x, topo)
    topo2, _ = _setup(pos=(o[0] + shift[0], o[1] + shift[1]), h=3.0)
    assert mean_rsrp_db(pp, 0, 0, (x[0] + shift[0], x[1] + shift[1]), topo2) == pytest.approx(base, abs=1e-9)
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    topo3, pp3 = _setup(omega=8.0, eta=2.0, center=c + theta, pos=tuple(R @ o), h=3.0)
    assert mean_rsrp_db(pp3, 0, 0, tuple(R @ x), topo3) == pytest.approx(base, abs=1e-7)


@given(st.floats(-100, 100), st.floats(-5, 5))
def test_loglik_maximised_at_mean(y, dy):
    topo, pp = _setup(sigma=0.8)
    x = (3.0, 4.0)
    mu = mean_rsrp_db(pp, 0, 0, x, topo)
    at_mean = log_likelihood_obs(Observation(1, {(0, 0): mu}), x, pp, topo)
    assert log_likelihood_obs(Observation(1, {(0, 0): mu + dy}), x, pp, topo) <= at_mean


@given(st.floats(0.5, 500), st.floats(1e-3, 500))
def test_mean_decreases_with_distance(d, gap):
    topo, pp = _setup(alpha=-25.0)
    assert mean_rsrp_db(pp, 0, 0, (d + gap, 0), topo) < mean_rsrp_db(pp, 0, 0, (d, 0), topo)
