import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blindmap.acceptance import brute_force_map, _chebyshev_neighbours, random_viterbi_instance
from blindmap.channel import BeamPattern, MeasurementSeries, PathLossParams, PropagationParams
from blindmap.errors import ConfigError, DegenerateGamma, EmptyRegion, LengthMismatch, NotAdjacent
from blindmap.mobility import MobilityParams, Trajectory
from blindmap.synth import PPConfig, TrajConfig, gen_scenario1, generate_series
from blindmap.topology import BaseStation, Topology
from blindmap.trajectory import (KMH, NO_PRUNE, EmissionModel, GridGraph, PruneConfig, RecoverConfig,
                                 ViterbiStats, baseline_mar, baseline_wcl, build_grid, discretize_transition,
                                 localization_error, objective, objective_grad, path_score, recover,
                                 refine_gradient, transition_table, viterbi2)


def _topo(positions, beams=1, h=1.0):
    st_ = tuple(BaseStation(i, p, beams, h) for i, p in enumerate(positions))
    return Topology(st_, (-50, -50, 50, 50))


def _pp(topo, sigma=0.5):
    pl = {q: PathLossParams(-25.0, 5.0, sigma) for q in topo.ids}
    pat = {s.id: [BeamPattern() for _ in range(s.beam_count)] for s in topo.stations}
    return PropagationParams(pl, pat)


def test_build_grid_examples():
    assert len(build_grid((0, 0, 10, 10), 1.0)) == 121
    g = build_grid((0, 0, 10, 10), 1.0, 120 * KMH, 0.5)
    assert g.hop_limit == 17
    assert 0.5 * 120 / 3.6 == pytest.approx(16.67, abs=0.01)


def test_build_grid_adjacency_symmetric_and_includes_self():
    g = build_grid((0, 0, 6, 4), 1.0, 3.0, 1.0)
    assert g.hop_limit == 3
    adj = [set(g.neighbors(i).tolist()) for i in range(len(g))]
    for i, a in enumerate(adj):
        assert i in a
        for j in a:
            assert i in adj[j]
            assert np.abs(g.vertices[i] - g.vertices[j]).max() <= 3.0 + 1e-9


def test_build_grid_polyline():
    g = build_grid(None, 1.0, 2.0, 1.0, polyline=((0, 0), (5, 0), (5, 3)))
    assert len(g) == 9
    assert g.nbr_count.max() == 2 * g.hop_limit + 1


def test_build_grid_errors():
    with pytest.raises(ConfigError):
        build_grid((0, 0, 1, 1), 0.0)
    with pytest.raises(EmptyRegion):
        build_grid((0, 0, -1, 1), 1.0)
    with pytest.raises(ConfigError):
        GridGraph.from_adjacency([(0, 0), (1, 0)], [[0, 1], [1]])


def test_grid_nearest():
    g = build_grid((0, 0, 10, 10), 1.0)
    ids = g.nearest([(3.2, 4.7), (-5, 50)])
    np.testing.assert_array_equal(g.vertices[ids], [[3, 5], [0, 10]])


def test_discretize_transition_sums_to_one():
    g = build_grid((0, 0, 8, 8), 1.0, 2.0, 1.0)
    mp = MobilityParams((0.5, 0.0), 1.0, 0.8, 1.0)
    b, a = 40, 39
    total = sum(discretize_transition(int(c), b, a, mp, g) for c in g.neighbors(b))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_discretize_transition_flat_limit():
    g = build_grid((0, 0, 8, 8), 1.0, 2.0, 1.0)
    mp = MobilityParams((0.0, 0.0), 1e12, 0.8, 1.0)
    nb = g.neighbors(40)
    p = [discretize_transition(int(c), 40, 31, mp, g) for c in nb]
    np.testing.assert_allclose(p, 1.0 / len(nb), rtol=1e-6)


def test_discretize_transition_argmax_matches_density():
    g = build_grid((0, 0, 8, 8), 1.0, 2.0, 1.0)
    mp = MobilityParams((1.0, 0.0), 0.5, 0.5, 1.0)
    nb = g.neighbors(40)
    p = np.array([discretize_transition(int(c), 40, 39, mp, g) for c in nb])
    mean = 1.5 * g.vertices[40] - 0.5 * g.vertices[39] + mp.drift()
    dens = -((g.vertices[nb] - mean) ** 2).sum(1)
    assert nb[np.argmax(p)] == nb[np.argmax(dens)]


def test_discretize_transition_not_adjacent():
    g = build_grid((0, 0, 8, 8), 1.0, 1.0, 1.0)
    mp = MobilityParams((0.0, 0.0), 1.0, 0.8, 1.0)
    with pytest.raises(NotAdjacent):
        discretize_transition(80, 0, 0, mp, g)
    with pytest.raises(DegenerateGamma):
        transition_table(g, [0], [0], MobilityParams((0, 0), 1.0, 1.0, 1.0))


def test_viterbi_matches_brute_force_path_graph():
    # five vertices on a line, hop limit 1, four slots
    V = np.array([[float(i), 0.0] for i in range(5)])
    adj = [[j for j in (i - 1, i, i + 1) if 0 <= j < 5] for i in range(5)]
    g = GridGraph.from_adjacency(V, adj)
    rng = np.random.default_rng(0)
    topo = _topo([(-3.0, 4.0), (7.0, -2.0)], beams=1)
    pp = _pp(topo, 2.0)
    mp = MobilityParams((0.5, 0.0), 2.0, 0.6, 1.0)
    for _ in range(20):
        series = MeasurementSeries(1.0, topo.beam_keys(), rng.uniform(-30, -10, (4, 2)))
        got = viterbi2(series, pp, mp, g, NO_PRUNE, topo)
        path, best = brute_force_map(series, pp, mp, V, [set(a) for a in adj], topo)
        np.testing.assert_array_equal(got.positions, V[list(path)])


def test_viterbi_random_small_instances_exact():
    rng = np.random.default_rng(1)
    for _ in range(30):
        graph, topo, pp, mp, series, tau, K = random_viterbi_instance(rng)
        stats = ViterbiStats()
        got = viterbi2(series, pp, mp, graph, NO_PRUNE, topo, stats=stats)
        path, best = brute_force_map(series, pp, mp, graph.vertices,
                                     _chebyshev_neighbours(graph.vertices, tau, K), topo)
        np.testing.assert_array_equal(got.positions, graph.vertices[list(path)])
        assert stats.score == pytest.approx(best, rel=1e-9, abs=1e-9)


def test_viterbi_noiseless_recovers_generating_path():
    g = build_grid((0, 0, 20, 20), 1.0, 2.0, 1.0)
    topo = _topo([(-5, -5), (25, -5), (25, 25), (-5, 25)])
    pp = _pp(topo, 0.1)
    truth = Trajectory(np.array([[2.0 + t, 3.0 + 0.0 * t] for t in range(12)]))
    series = generate_series(topo, pp, truth, True, np.random.default_rng(0), 1.0)
    mp = MobilityParams((1.0, 0.0), 0.5, 0.5, 1.0)
    got = viterbi2(series, pp, mp, g, NO_PRUNE, topo)
    np.testing.assert_array_equal(got.positions, truth.positions)


def test_top_n_full_equals_no_prune():
    g = build_grid((0, 0, 6, 6), 1.0, 1.0, 1.0)
    topo = _topo([(-3, 1), (9, 2), (4, 9)])
    pp = _pp(topo, 1.5)
    mp = MobilityParams((0.5, 0.5), 1.0, 0.7, 1.0)
    series = MeasurementSeries(1.0, topo.beam_keys(), np.random.default_rng(2).uniform(-40, -20, (8, 3)))
    a = viterbi2(series, pp, mp, g, NO_PRUNE, topo)
    b = viterbi2(series, pp, mp, g, PruneConfig(mode="top-n", n=len(g) * g.nbr_count.max()), topo)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_pruned_expansions_within_envelope():
    g = build_grid((0, 0, 30, 30), 1.0, 2.0, 1.0)
    topo = _topo([(-5, -5), (35, -5), (35, 35), (-5, 35)])
    pp = _pp(topo, 0.5)
    truth = Trajectory(np.array([[5.0 + t, 5.0 + 0.5 * t] for t in range(15)]))
    series = generate_series(topo, pp, truth, False, np.random.default_rng(3), 1.0)
    mp = MobilityParams((1.0, 0.5), 0.5, 0.5, 1.0)
    pc = PruneConfig(n_min=5, n_max=20)
    stats = ViterbiStats()
    viterbi2(series, pp, mp, g, pc, topo, stats=stats)
    K = g.hop_limit
    assert max(stats.expansions[1:]) <= pc.n_max * (2 * K + 1) ** 2
    assert max(stats.states) <= pc.n_max


def test_pruned_expansions_polyline_envelope():
    g = build_grid(None, 1.0, 2.0, 1.0, polyline=((0, 0), (40, 0)))
    topo = _topo([(-5, 5), (45, 5)])
    pp = _pp(topo, 0.5)
    truth = Trajectory(np.array([[1.0 + 1.5 * t, 0.0] for t in range(20)]))
    series = generate_series(topo, pp, truth, False, np.random.default_rng(4), 1.0)
    mp = MobilityParams((1.5, 0.0), 0.5, 0.5, 1.0)
    pc = PruneConfig(n_min=3, n_max=6)
    stats = ViterbiStats()
    viterbi2(series, pp, mp, g, pc, topo, stats=stats)
    assert max(stats.expansions[1:]) <= pc.n_max * (2 * g.hop_limit + 1)


def test_path_score_equals_viterbi_score(rng):
    graph, topo, pp, mp, series, tau, K = random_viterbi_instance(np.random.default_rng(5))
    stats = ViterbiStats()
    got = viterbi2(series, pp, mp, graph, NO_PRUNE, topo, stats=stats)
    emis = EmissionModel(series, pp, topo, graph)
    assert path_score(graph.nearest(got.positions), emis, graph, mp) == pytest.approx(stats.score, abs=1e-9)


def _continuous_case(seed=0):
    rng = np.random.default_rng(seed)
    topo = Topology(tuple(BaseStation(i, tuple(rng.uniform(-40, 40, 2)), 2, 2.0) for i in range(3)),
                    (-50, -50, 50, 50))
    pl = {q: PathLossParams(rng.uniform(-35, -15), rng.uniform(0, 10), rng.uniform(0.5, 2)) for q in range(3)}
    pat = {q: [BeamPattern(rng.uniform(2, 10), rng.uniform(0.5, 4), rng.uniform(0, 6.28)) for _ in range(2)]
           for q in range(3)}
    pp = PropagationParams(pl, pat)
    x = np.cumsum(rng.normal(0.5, 0.3, (10, 2)), axis=0)
    series = generate_series(topo, pp, Trajectory(x), False, rng, 0.5)
    mp = MobilityParams((1.0, 1.0), 2.0, 0.9, 0.5)
    return topo, pp, mp, series, x


def test_objective_gradient_matches_finite_differences():
    topo, pp, mp, series, x = _continuous_case()
    x0 = x + np.random.default_rng(1).normal(0, 1.0, x.shape)
    f, g = objective_grad(series, pp, mp, topo, x0)
    assert f == pytest.approx(objective(series, pp, mp, topo, x0))
    h = 1e-5
    fd = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (objective(series, pp, mp, topo, xp) - objective(series, pp, mp, topo, xm)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


@pytest.mark.parametrize("method", ["gradient", "lbfgs"])
def test_refine_non_decreasing(method):
    topo, pp, mp, series, x = _continuous_case(2)
    x0 = Trajectory(x + np.random.default_rng(3).normal(0, 2.0, x.shape))
    trace = []
    out = refine_gradient(x0, series, pp, mp, topo, lr=0.05, iters=100, trace=trace, method=method)
    assert np.all(np.diff(trace) >= -1e-9)
    assert objective(series, pp, mp, topo, out.positions) >= objective(series, pp, mp, topo, x0.positions)


def test_refine_at_optimum_returns_input():
    topo, pp, mp, series, x = _continuous_case(4)
    opt = refine_gradient(Trajectory(x), series, pp, mp, topo, iters=2000, tol=1e-10)
    again = refine_gradient(opt, series, pp, mp, topo, method="gradient", tol=1e-3)
    np.testing.assert_allclose(again.positions, opt.positions, atol=1e-6)


def test_refine_respects_bounds():
    topo, pp, mp, series, x = _continuous_case(5)
    box = (0.0, 0.0, 2.0, 2.0)
    out = refine_gradient(Trajectory(x), series, pp, mp, topo, bounds=box)
    assert out.positions.min() >= 0.0 and out.positions.max() <= 2.0


def test_localization_error_examples():
    a = Trajectory(np.random.default_rng(0).normal(size=(10, 2)))
    assert localization_error(a, a) == 0.0
    assert localization_error(a, Trajectory(a.positions + [3.0, 0.0])) == pytest.approx(3.0)
    with pytest.raises(LengthMismatch):
        localization_error(a, Trajectory(a.positions[:5]))


def test_baseline_mar_examples():
    topo = _topo([(1.0, 2.0)])
    s = MeasurementSeries(1.0, [(0, 0)], np.array([[-10.0], [-20.0]]))
    np.testing.assert_array_equal(baseline_mar(s, topo).positions, [[1, 2], [1, 2]])
    topo = _topo([(0.0, 0.0), (5.0, 0.0)])
    s = MeasurementSeries(1.0, [(0, 0), (1, 0)], np.array([[-10.0, -10.0]]))
    np.testing.assert_array_equal(baseline_mar(s, topo).positions, [[0, 0]])


def test_baseline_mar_matches_argmax(rng):
    topo = _topo([tuple(p) for p in rng.uniform(-40, 40, (5, 2))])
    vals = rng.uniform(-60, -10, (30, 5))
    s = MeasurementSeries(1.0, topo.beam_keys(), vals)
    np.testing.assert_array_equal(baseline_mar(s, topo).positions, topo.positions[vals.argmax(1)])


def test_baseline_wcl_examples(rng):
    topo = _topo([(3.0, 4.0)])
    s = MeasurementSeries(1.0, [(0, 0)], np.array([[-33.0]]))
    np.testing.assert_allclose(baseline_wcl(s, topo).positions, [[3, 4]])
    topo = _topo([(0.0, 0.0), (6.0, 2.0)])
    s = MeasurementSeries(1.0, [(0, 0), (1, 0)], np.array([[-15.0, -15.0]]))
    np.testing.assert_allclose(baseline_wcl(s, topo).positions, [[3, 1]])


@given(st.lists(st.floats(-80, 0), min_size=3, max_size=3))
def test_baseline_wcl_inside_hull(ys):
    topo = _topo([(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)])
    s = MeasurementSeries(1.0, topo.beam_keys(), np.array([ys]))
    x = baseline_wcl(s, topo).positions[0]
    # inside the triangle: convex weights summing to one
    assert x[0] >= -1e-9 and x[1] >= -1e-9 and x.sum() <= 10 + 1e-9


def test_recover_rejects_bad_config():
    topo = _topo([(0, 0)])
    s = MeasurementSeries(1.0, [(0, 0)], np.zeros((3, 1)))
    g = build_grid((0, 0, 2, 2), 1.0)
    with pytest.raises(DegenerateGamma):
        recover(s, g, 1.0, 0.5, topo=topo, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        recover(s, g, 0.9, 0.5, RecoverConfig(mode="oracle"), topo=topo, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        recover(s, g, 0.9, 0.5, RecoverConfig(warm_start="x"), topo=topo, rng=np.random.default_rng(0))


def _small_recovery():
    tc = TrajConfig(T=120, slot=0.5, waypoints=((0, 0), (40, 0), (40, 30)), speed=1.5)
    pc = PPConfig(sigma=0.1, height_offset=5.0, pad=20.0)
    return gen_scenario1(8, tc, pc, np.random.default_rng(3))


def test_recover_trace_monotone_and_reproducible():
    topo, traj, series, truth = _small_recovery()
    g = build_grid(topo.region, 1.0, 3.0, 0.5)
    cfg = RecoverConfig(v_max=3.0, max_outer=3, joint_rounds=1, joint_iters=300)
    a = recover(series, g, 0.9, 0.5, cfg, topo=topo, rng=np.random.default_rng(0))
    b = recover(series, g, 0.9, 0.5, cfg, topo=topo, rng=np.random.default_rng(0))
    assert np.all(np.diff(a.trace) >= -1e-6 * np.abs(a.trace[:-1]))
    np.testing.assert_array_equal(a.trajectory.positions, b.trajectory.positions)
    assert a.trace == b.trace


def test_recover_gma_mode_uses_truth():
    topo, traj, series, truth = _small_recovery()
    g = build_grid(topo.region, 1.0, 3.0, 0.5)
    res = recover(series, g, 0.9, 0.5, RecoverConfig(v_max=3.0, mode="gma", max_outer=3), topo=topo,
                  rng=np.random.default_rng(0), truth_pp=truth.pp)
    assert res.pp.path_loss == truth.pp.path_loss
    assert localization_error(traj, res.trajectory) < 3.0


@pytest.mark.slow
def test_recover_scenario1_self_consistency():
    tc = TrajConfig(T=2000, slot=0.5, v0=(0.2, 0.1))
    pc = PPConfig(sigma=0.1, height_offset=5.0, pad=30.0)
    topo, traj, series, truth = gen_scenario1(8, tc, pc, np.random.default_rng(0))
    tau = 1.0
    g = build_grid(topo.region, tau, 2.0, 0.5)
    res = recover(series, g, 0.9, 0.5, RecoverConfig(v_max=2.0), topo=topo, rng=np.random.default_rng(0))
    assert localization_error(traj, res.trajectory) < 3 * tau
