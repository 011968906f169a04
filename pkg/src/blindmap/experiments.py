"""Desk-scale experiment set-ups shared by the CLI ``repro`` command and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .crlb import BoundConfig, MLEScenario, bound_limited_x, bound_unlimited_v, bound_unlimited_x, mle_experiment
from .mobility import MobilityParams
from .radiomap import (FingerprintIndex, PredictConfig, baseline_mi, build_map, csi_tensor, fit_ar, metric_ea,
                       metric_ee, metric_eq, predict_next)
from .synth import PPConfig, TrajConfig, gen_csi, gen_mimo, generate_series, make_trajectory, report_top
from .topology import BaseStation, Topology
from .trajectory import (EmissionModel, RecoverConfig, baseline_mar, baseline_wcl, build_grid,
                         localization_error, recover)

T_SCALING = (200, 400, 800, 1600, 3200)


# ---------------------------------------------------------------- CRLB scaling

@dataclass
class ScalingResult:
    T: list
    mse_x: list
    mse_v: list
    bound_x: list
    bound_v: list
    slope_x: float
    slope_v: float
    n_failed: list


def scaling_experiment(trials: int = 50, T_list=T_SCALING, seed: int = 0, workers: int = 1,
                       scenario: MLEScenario = MLEScenario()) -> ScalingResult:
    """MLE mean squared errors on Poisson layouts next to the unlimited-region bounds."""
    cur = mle_experiment(scenario, T_list, trials, np.random.default_rng(seed), workers=workers)
    cfg = BoundConfig.from_db([scenario.alpha], [scenario.sigma], r0=scenario.clearance)
    bx = [bound_unlimited_x(T, scenario.kappa, scenario.R, scenario.clearance, cfg) for T in cur.T]
    bv = [bound_unlimited_v(T, scenario.kappa, scenario.R, scenario.clearance, cfg) / scenario.delta ** 2
          for T in cur.T]
    return ScalingResult(cur.T, cur.mse_x, cur.mse_v, bx, bv, cur.slope("x"), cur.slope("v"), cur.n_failed)


@dataclass
class PlateauResult:
    T_bound: list
    bound_x: list
    mse_T: list
    mse_x: list
    bound_ratio: float
    mse_ratio: float


def plateau_topology(Q: int = 8, half_width: float = 100.0, seed: int = 7) -> Topology:
    """Q stations uniform in a square around the origin, none within 10 m of the x axis."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < Q:
        p = rng.uniform(-half_width, half_width, size=2)
        if abs(p[1]) > 10.0:
            pts.append(p)
    st = tuple(BaseStation(i, (float(p[0]), float(p[1])), 1) for i, p in enumerate(pts))
    return Topology(st, (-half_width, -half_width, half_width, half_width), math.inf)


def plateau_experiment(trials: int = 50, seed: int = 0, workers: int = 1,
                       T_bound=(100, 1000, 10000, 20000), T_mse=(4000, 8000)) -> PlateauResult:
    """Limited-region bound and MLE errors for a fixed number of always-heard stations."""
    topo = plateau_topology()
    sc = MLEScenario(kind="limited", clearance=5.0, common_random_numbers=True)
    cfg = BoundConfig.from_db([sc.alpha], [sc.sigma], r0=sc.clearance)
    v = np.asarray(sc.velocity) * sc.delta
    bx = [bound_limited_x(T, topo, np.asarray(sc.x0, float), v, cfg) for T in T_bound]
    cur = mle_experiment(sc, T_mse, trials, np.random.default_rng(seed), workers=workers)
    return PlateauResult(list(T_bound), bx, cur.T, cur.mse_x, bx[-1] / bx[-2], cur.mse_x[1] / cur.mse_x[0])


# ---------------------------------------------------------------- blind recovery

@dataclass
class RecoveryScenario:
    """Seven 7-beam sector stations around a 675 m route with two turns."""

    seed: int = 1
    T: int = 1350
    slot: float = 1 / 12
    speed: float = 6.0
    sigma: float = 0.25
    alpha: float = -30.0
    beta: float = 5.0
    height_offset: float = 53.0
    omega: float = 10.0
    tau: float = 1.0
    v_max: float = 120 / 3.6
    gamma: float = 0.9
    waypoints: tuple = ((0, 0), (250, 0), (250, 200), (25, 200))
    positions: tuple = ((-50, -40), (125, -50), (300, -40), (310, 100), (300, 250), (125, 260), (-50, 200))

    def generate(self):
        tc = TrajConfig(T=self.T, slot=self.slot, waypoints=self.waypoints, speed=self.speed)
        pc = PPConfig(alpha=self.alpha, beta=self.beta, sigma=self.sigma, height_offset=self.height_offset,
                      omega=self.omega, omega_spread=2.0, alpha_spread=3.0, beta_spread=3.0, pad=60.0)
        Q = len(self.positions)
        return gen_mimo(Q, 7, "sector", tc, pc, np.random.default_rng(self.seed), positions=self.positions)


@dataclass
class RecoveryResult:
    errors: dict
    trace: list
    warm_trace: list = field(default_factory=list)


def recovery_experiment(sc: RecoveryScenario = RecoveryScenario(), cfg: RecoverConfig = RecoverConfig(),
                        seed: int = 0, extra_modes=()) -> RecoveryResult:
    """E_l of blind recovery, the two baselines and optionally the ``gma`` / ``m1`` modes."""
    topo, traj, series, truth = sc.generate()
    graph = build_grid(topo.region, sc.tau, sc.v_max, sc.slot)
    errs = {"mar": localization_error(traj, baseline_mar(series, topo)),
            "wcl": localization_error(traj, baseline_wcl(series, topo))}
    res = recover(series, graph, sc.gamma, sc.slot, cfg, topo=topo, rng=np.random.default_rng(seed))
    errs["proposed"] = localization_error(traj, res.trajectory)
    for mode in extra_modes:
        c = RecoverConfig(**{**cfg.__dict__, "mode": mode})
        r = recover(series, graph, sc.gamma, sc.slot, c, topo=topo, rng=np.random.default_rng(seed),
                    truth_pp=truth.pp)
        errs[mode] = localization_error(traj, r.trajectory)
    return RecoveryResult(errs, res.trace, res.warm_trace)


# ---------------------------------------------------------------- CSI prediction

@dataclass
class PredictionScenario:
    """A slow mapping run round a loop and a fast test run the other way round.

    Terminals report only the ``n_report`` strongest SSB beams of each slot. CSI beams are
    a finer set of ``n_csi`` beams per station with independent noise.
    """

    seed: int = 3
    map_T: int = 1000
    map_speed: float = 2.0
    test_T: int = 200
    test_speed: float = 10.0
    slot: float = 0.5
    sigma: float = 0.5
    n_report: int = 8
    n_csi: int = 32
    tau: float = 2.0
    v_max: float = 12.0
    gamma: float = 0.9
    history_len: int = 12
    stride: int = 2
    mode: str = "gma"
    waypoints: tuple = ((0, 0), (300, 0), (300, 200), (0, 200), (0, 0))
    positions: tuple = ((-40, -40), (340, -40), (340, 240), (-40, 240))


@dataclass
class PredictionResult:
    metrics: dict  # method -> {"eq1", "ea", "ee4", "match_m"}
    map_error: float
    n_queries: int


def prediction_experiment(sc: PredictionScenario = PredictionScenario(), recover_seed: int = 0) -> PredictionResult:
    """Build a map from a recovered mapping run, then forecast test-run CSI three ways.

    The proposed method predicts next-slot SSB means from the windowed fit; MI and AR
    extrapolate the reported SSB history. All three then look up the nearest map entry,
    and the metrics compare that entry's CSI with the true next-slot CSI.
    """
    rng = np.random.default_rng(sc.seed)
    tc = TrajConfig(T=sc.map_T, slot=sc.slot, waypoints=sc.waypoints, speed=sc.map_speed)
    pc = PPConfig(alpha=-30.0, beta=20.0, sigma=sc.sigma, height_offset=20.0, omega=10.0, omega_spread=2.0,
                  alpha_spread=3.0, beta_spread=3.0, pad=40.0)
    Q = len(sc.positions)
    topo, traj, full, truth = gen_mimo(Q, Q, "sector", tc, pc, rng, positions=sc.positions)
    series = report_top(full, sc.n_report)
    tc2 = TrajConfig(T=sc.test_T, slot=sc.slot, waypoints=tuple(reversed(sc.waypoints)), speed=sc.test_speed)
    traj2 = make_trajectory(tc2, rng)
    test = report_top(generate_series(topo, truth.pp, traj2, False, rng, sc.slot), sc.n_report)
    csi = gen_csi(topo, truth.pp, sc.n_csi, rng=rng)
    c_map, c_test = csi.series(traj, rng, sc.slot), csi.series(traj2, rng, sc.slot)
    graph = build_grid(topo.region, sc.tau, sc.v_max, sc.slot)
    res = recover(series, graph, sc.gamma, sc.slot, RecoverConfig(v_max=sc.v_max, mode=sc.mode),
                  topo=topo, rng=np.random.default_rng(recover_seed), truth_pp=truth.pp)
    index = FingerprintIndex(build_map(res.trajectory, series, c_map))
    emis = EmissionModel(test, res.pp, topo, graph)
    L = sc.history_len
    # uninformative drift prior: the window fit estimates the velocity itself
    prior = MobilityParams((0.0, 0.0), 20.0, sc.gamma, sc.slot)
    cfg = PredictConfig(history_len=L)
    ar = fit_ar(series.values, L)
    truth_csi, ids = csi_tensor(c_test)
    picks = {k: [] for k in ("proposed", "mi", "ar")}
    match = {k: [] for k in picks}
    target = []
    for t in range(L, test.T - 1, sc.stride):
        h = test.window(0, t + 1)
        pr = predict_next(h, index, res.pp, prior, topo, graph, cfg, emission=emis)
        keys = list(pr.y_hat)
        cols = [test.keys.index(k) for k in keys]
        queries = {"proposed": pr.y_hat,
                   "mi": dict(zip(keys, baseline_mi(h.values, L)[cols])),
                   "ar": dict(zip(keys, ar.predict(h.values)[cols]))}
        for name, q in queries.items():
            e = index.entries[index.nearest(q)]
            picks[name].append(np.stack([e.csi_records[i] for i in ids]))
            match[name].append(float(np.linalg.norm(e.location - traj2.positions[t + 1])))
        target.append(truth_csi[t + 1])
    target = np.array(target)
    out = {}
    for name, X in picks.items():
        X = np.array(X)
        out[name] = {"eq1": metric_eq(X, target, 1), "ea": metric_ea(X, target), "ee4": metric_ee(X, target, 4),
                     "match_m": float(np.median(match[name]))}
    return PredictionResult(out, localization_error(traj, res.trajectory), len(target))
