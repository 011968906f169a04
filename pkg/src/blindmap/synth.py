"""Scenario generators: fixed layouts, Poisson layouts and multi-beam stations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import BeamPattern, MeasurementSeries, PathLossParams, PropagationParams, mean_matrix
from .errors import ConfigError
from .mobility import MobilityParams, Trajectory, simulate
from .topology import TWO_PI, BaseStation, Topology, distances, padded_region, sample_ppp


@dataclass(frozen=True)
class TrajConfig:
    """Either a Gauss-Markov run (``waypoints`` empty) or a constant-speed waypoint route."""

    T: int = 200
    slot: float = 0.5
    x0: tuple = (0.0, 0.0)
    v0: tuple = (10.0, 0.0)
    gamma: float = 1.0
    accel_var: float = 0.0
    mean_velocity: tuple | None = None
    waypoints: tuple = ()
    speed: float = 6.0

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if not self.slot > 0:
            raise ConfigError("slot must be positive")
        if self.waypoints and len(self.waypoints) < 2:
            raise ConfigError("a route needs at least two waypoints")


@dataclass(frozen=True)
class PPConfig:
    alpha: float = -20.0
    beta: float = 5.0
    sigma: float = 0.5
    alpha_spread: float = 0.0
    beta_spread: float = 0.0
    height_offset: float = 0.0
    omega: float = 10.0
    omega_spread: float = 0.0
    eta: float | None = None
    sector: float = TWO_PI / 3
    pad: float = 50.0
    min_clearance: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError("sigma must be non-negative")
        if self.height_offset < 0:
            raise ConfigError("height_offset must be non-negative")


def default_eta(sector: float, M: int) -> float:
    """Spread whose dB gain drops to half of the peak at +-w/2, w = sector / M."""
    w = sector / M
    return 4.0 * math.log(2.0) / (w * w)


@dataclass
class GroundTruth:
    topology: Topology
    trajectory: Trajectory
    pp: PropagationParams
    mp: MobilityParams
    seeds: dict
    config: dict = field(default_factory=dict)
    series: MeasurementSeries | None = None

    def to_dict(self) -> dict:
        return {
            "pp": self.pp.to_dict(),
            "mobility": {"mean_velocity": list(self.mp.mean_velocity), "accel_var": self.mp.accel_var,
                         "gamma": self.mp.gamma, "slot": self.mp.slot},
            "seeds": self.seeds,
            "config": self.config,
        }


def _child_seeds(rng: np.random.Generator, names):
    return {n: int(s) for n, s in zip(names, rng.integers(0, 2 ** 63 - 1, size=len(names)))}


def make_trajectory(cfg: TrajConfig, rng: np.random.Generator) -> Trajectory:
    if cfg.waypoints:
        return route(cfg.waypoints, cfg.speed, cfg.slot, cfg.T)
    v = cfg.mean_velocity if cfg.mean_velocity is not None else cfg.v0
    mp = MobilityParams(tuple(v), cfg.accel_var, cfg.gamma, cfg.slot)
    x0 = np.asarray(cfg.x0, dtype=float)
    x1 = x0 + cfg.slot * np.asarray(cfg.v0, dtype=float)
    return simulate(x0, x1, mp, cfg.T, rng)


def route(waypoints, speed: float, slot: float, T: int) -> Trajectory:
    """Constant-speed walk along a polyline, one position per slot, stopping at its end."""
    p = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    u = np.minimum(speed * slot * np.arange(T), s[-1])
    return Trajectory(np.column_stack([np.interp(u, s, p[:, 0]), np.interp(u, s, p[:, 1])]))


def truth_mobility(traj: Trajectory, cfg: TrajConfig) -> MobilityParams:
    if cfg.waypoints:
        v = (traj.positions[-1] - traj.positions[0]) / ((len(traj) - 1) * cfg.slot)
        return MobilityParams((v[0], v[1]), 0.0, 1.0, cfg.slot)
    v = cfg.mean_velocity if cfg.mean_velocity is not None else cfg.v0
    return MobilityParams(tuple(v), cfg.accel_var, cfg.gamma, cfg.slot)


def _clear_of_path(points, traj: Trajectory, clearance: float) -> np.ndarray:
    if clearance <= 0 or len(points) == 0:
        return np.ones(len(points), dtype=bool)
    d = distances(traj.positions, points)
    return d.min(0) > clearance


def _place_uniform(Q, region, traj, clearance, rng, max_tries=10000):
    x0, y0, x1, y1 = region
    out = []
    for _ in range(max_tries):
        p = np.array([[rng.uniform(x0, x1), rng.uniform(y0, y1)]])
        if _clear_of_path(p, traj, clearance)[0]:
            out.append(p[0])
            if len(out) == Q:
                return np.array(out)
    raise ConfigError("could not place stations clear of the trajectory")


def path_loss_params(ids, cfg: PPConfig, rng) -> dict:
    out = {}
    for q in ids:
        a = cfg.alpha + (rng.uniform(-cfg.alpha_spread, cfg.alpha_spread) if cfg.alpha_spread else 0.0)
        b = cfg.beta + (rng.uniform(-cfg.beta_spread, cfg.beta_spread) if cfg.beta_spread else 0.0)
        out[q] = PathLossParams(a, b, max(cfg.sigma, 1e-12))
    return out


def generate_series(topo: Topology, pp: PropagationParams, traj: Trajectory, sigma_zero: bool,
                    rng: np.random.Generator, slot: float, keys=None, visible=None) -> MeasurementSeries:
    """Readings along ``traj``; one noise draw per (station, slot) shared by its beams.

    ``visible`` is an optional (T, Q) boolean mask in station order.
    """
    keys = topo.beam_keys() if keys is None else list(keys)
    mu = mean_matrix(pp, topo, keys, traj.positions)
    ids = topo.ids
    col_station = np.array([ids.index(q) for q, _ in keys], dtype=int)
    sig = np.array([pp.path_loss[q].sigma for q in ids])
    xi = rng.standard_normal((len(traj), len(ids))) * sig
    y = mu if sigma_zero else mu + xi[:, col_station]
    if visible is not None:
        y = np.where(visible[:, col_station], y, np.nan)
    return MeasurementSeries(slot, keys, y)


def visibility(topo: Topology, traj: Trajectory) -> np.ndarray:
    if math.isinf(topo.connect_radius):
        return np.ones((len(traj), len(topo)), dtype=bool)
    return distances(traj.positions, topo.positions, topo.heights) <= topo.connect_radius


def gen_scenario1(Q: int, traj_config: TrajConfig = TrajConfig(), pp_config: PPConfig = PPConfig(),
                  rng: np.random.Generator | None = None):
    """Q single-beam stations around the trajectory, all heard in every slot."""
    if Q < 1:
        raise ConfigError("Q must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    seeds = _child_seeds(rng, ["trajectory", "layout", "noise"])
    traj = make_trajectory(traj_config, np.random.default_rng(seeds["trajectory"]))
    lr = np.random.default_rng(seeds["layout"])
    region = padded_region(traj.positions, pp_config.pad)
    pos = _place_uniform(Q, region, traj, pp_config.min_clearance, lr)
    stations = tuple(BaseStation(i, tuple(pos[i]), 1, pp_config.height_offset) for i in range(Q))
    topo = Topology(stations, region, math.inf)
    pp = PropagationParams(path_loss_params(topo.ids, pp_config, lr),
                           {q: [BeamPattern()] for q in topo.ids})
    series = generate_series(topo, pp, traj, pp_config.sigma == 0,
                             np.random.default_rng(seeds["noise"]), traj_config.slot)
    truth = GroundTruth(topo, traj, pp, truth_mobility(traj, traj_config), seeds,
                        {"scenario": 1, "Q": Q, "traj": _cfg_dict(traj_config), "pp": _cfg_dict(pp_config)},
                        series)
    return topo, traj, series, truth


def gen_scenario2(kappa: float, R: float, traj_config: TrajConfig = TrajConfig(),
                  pp_config: PPConfig = PPConfig(), rng: np.random.Generator | None = None):
    """Poisson layout on the trajectory box padded by R; each slot hears stations within R."""
    if not kappa > 0 or not R > 0:
        raise ConfigError("kappa and R must be positive")
    rng = np.random.default_rng() if rng is None else rng
    seeds = _child_seeds(rng, ["trajectory", "layout", "noise"])
    traj = make_trajectory(traj_config, np.random.default_rng(seeds["trajectory"]))
    lr = np.random.default_rng(seeds["layout"])
    region = padded_region(traj.positions, R)
    topo = sample_ppp(kappa, region, lr, height_offset=pp_config.height_offset, connect_radius=R)
    if pp_config.min_clearance > 0 and len(topo):
        ok = _clear_of_path(topo.positions, traj, pp_config.min_clearance)
        topo = Topology(tuple(s for s, k in zip(topo.stations, ok) if k), region, R)
    pp = PropagationParams(path_loss_params(topo.ids, pp_config, lr),
                           {q: [BeamPattern()] for q in topo.ids})
    vis = visibility(topo, traj)
    series = generate_series(topo, pp, traj, pp_config.sigma == 0,
                             np.random.default_rng(seeds["noise"]), traj_config.slot, visible=vis)
    truth = GroundTruth(topo, traj, pp, truth_mobility(traj, traj_config), seeds,
                        {"scenario": 2, "kappa": kappa, "R": R, "traj": _cfg_dict(traj_config),
                         "pp": _cfg_dict(pp_config)}, series)
    return topo, traj, series, truth


def beam_centers(M: int, layout: str, sector: float, orientation: float) -> np.ndarray:
    if layout == "separable":
        return np.mod(orientation + TWO_PI * np.arange(M) / M, TWO_PI)
    if layout == "sector":
        return np.mod(orientation + sector * ((np.arange(M) + 0.5) / M - 0.5), TWO_PI)
    raise ConfigError(f"unknown beam layout {layout!r}")


def aggregate_gain(patterns, phi) -> np.ndarray:
    """Sum of the beam gains at bearings ``phi``."""
    phi = np.asarray(phi, dtype=float)
    return sum(bp.gain(phi) for bp in patterns)


def gen_mimo(Q: int, M: int, beam_layout: str = "sector", traj_config: TrajConfig = TrajConfig(),
             pp_config: PPConfig = PPConfig(), rng: np.random.Generator | None = None,
             positions=None, connect_radius: float = math.inf):
    """Q stations with M beams each.

    ``sector`` spreads M beam centres over ``pp_config.sector`` facing the trajectory's box
    centre; ``separable`` spaces them evenly over the full circle so that the summed gain is
    flat in the bearing.
    """
    if M < 1 or Q < 1:
        raise ConfigError("Q and M must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    seeds = _child_seeds(rng, ["trajectory", "layout", "noise"])
    traj = make_trajectory(traj_config, np.random.default_rng(seeds["trajectory"]))
    lr = np.random.default_rng(seeds["layout"])
    region = padded_region(traj.positions, pp_config.pad)
    if positions is None:
        pos = _place_uniform(Q, region, traj, pp_config.min_clearance, lr)
    else:
        pos = np.asarray(positions, dtype=float).reshape(Q, 2)
        region = padded_region(np.vstack([traj.positions, pos]), pp_config.pad)
    stations = tuple(BaseStation(i, tuple(pos[i]), M, pp_config.height_offset) for i in range(Q))
    topo = Topology(stations, region, connect_radius)
    centre = np.array([(region[0] + region[2]) / 2, (region[1] + region[3]) / 2])
    eta = pp_config.eta if pp_config.eta is not None else default_eta(pp_config.sector, M)
    pat = {}
    for s in stations:
        dx, dy = centre - np.asarray(s.position)
        orient = math.atan2(dy, dx) % TWO_PI if (dx or dy) else 0.0
        cs = beam_centers(M, beam_layout, pp_config.sector, orient)
        om = pp_config.omega + (lr.uniform(-pp_config.omega_spread, pp_config.omega_spread, size=M)
                                if pp_config.omega_spread else np.zeros(M))
        if M == 1 and beam_layout == "sector" and pp_config.omega == 0:
            om = np.zeros(1)
        pat[s.id] = [BeamPattern(float(om[m]), eta, float(cs[m])) for m in range(M)]
    pp = PropagationParams(path_loss_params(topo.ids, pp_config, lr), pat)
    vis = visibility(topo, traj)
    series = generate_series(topo, pp, traj, pp_config.sigma == 0,
                             np.random.default_rng(seeds["noise"]), traj_config.slot, visible=vis)
    truth = GroundTruth(topo, traj, pp, truth_mobility(traj, traj_config), seeds,
                        {"scenario": "mimo", "Q": Q, "M": M, "layout": beam_layout, "eta": eta,
                         "traj": _cfg_dict(traj_config), "pp": _cfg_dict(pp_config)}, series)
    return topo, traj, series, truth


def regenerate_series(truth: GroundTruth) -> MeasurementSeries:
    """Rebuild the measurement series from the recorded parameters and noise seed."""
    slot = truth.mp.slot
    sigma_zero = truth.config.get("pp", {}).get("sigma", 1.0) == 0
    vis = visibility(truth.topology, truth.trajectory)
    return generate_series(truth.topology, truth.pp, truth.trajectory, sigma_zero,
                           np.random.default_rng(truth.seeds["noise"]), slot, visible=vis)


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass
class CsiModel:
    """Finer beam set sharing the stations and path loss of an SSB model."""

    topology: Topology
    pp: PropagationParams
    sigma: float

    def series(self, traj: Trajectory, rng: np.random.Generator, slot: float) -> MeasurementSeries:
        """Readings with an independent noise draw per beam and slot."""
        keys = self.topology.beam_keys()
        mu = mean_matrix(self.pp, self.topology, keys, traj.positions)
        return MeasurementSeries(slot, keys, mu + self.sigma * rng.standard_normal(mu.shape))


def gen_csi(topo: Topology, ssb_pp: PropagationParams, n_beams: int = 16, sector: float = 2 * math.pi / 3,
            omega: float = 12.0, sigma: float = 1.0, rng: np.random.Generator | None = None) -> CsiModel:
    """CSI beams spread over each station's SSB sector, narrower and slightly stronger."""
    rng = np.random.default_rng() if rng is None else rng
    eta = default_eta(sector, n_beams)
    st, pat = [], {}
    for s in topo.stations:
        c = np.array([bp.center for bp in ssb_pp.patterns[s.id]])
        orient = math.atan2(np.sin(c).mean(), np.cos(c).mean()) % TWO_PI
        cs = beam_centers(n_beams, "sector", sector, orient)
        om = omega + rng.uniform(-1.0, 1.0, size=n_beams)
        pat[s.id] = [BeamPattern(float(om[b]), eta, float(cs[b])) for b in range(n_beams)]
        st.append(BaseStation(s.id, s.position, n_beams, s.height_offset))
    ctopo = Topology(tuple(st), topo.region, topo.connect_radius)
    pl = {q: PathLossParams(p.alpha, p.beta, p.sigma) for q, p in ssb_pp.path_loss.items()}
    return CsiModel(ctopo, PropagationParams(pl, pat), sigma)


def report_top(series: MeasurementSeries, n: int) -> MeasurementSeries:
    """Keep the ``n`` strongest readings of each slot, as in a terminal's beam report."""
    v = series.values
    score = np.where(np.isnan(v), -np.inf, v)
    order = np.argsort(-score, axis=1, kind="stable")[:, :n]
    keep = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return MeasurementSeries(series.slot_duration, list(series.keys), np.where(keep, v, np.nan))
