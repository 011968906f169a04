"""Measurement model and per-slot observation likelihood.

Per-beam mean received power in dB::

    y = beta_q + alpha_q * log10 d(x, o_q) + omega_qm * exp(-eta_qm * wrap(phi - c_qm)**2)

with additive shadowing ``xi_{q,t} ~ N(0, sigma_q^2)`` drawn once per station and
slot. Angle differences are taken on the circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .topology import TWO_PI, Topology, bearing, bearings, distance, distances

LN10 = math.log(10.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PathLossParams:
    alpha: float
    beta: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")


@dataclass(frozen=True)
class BeamPattern:
    omega: float = 0.0
    eta: float = 0.0
    center: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        object.__setattr__(self, "center", float(self.center) % TWO_PI)

    def gain(self, phi):
        return self.omega * np.exp(-self.eta * angle_diff(phi, self.center) ** 2)


@dataclass
class PropagationParams:
    """Per-station path loss and per-beam patterns, keyed by station id."""

    path_loss: dict[int, PathLossParams]
    patterns: dict[int, list[BeamPattern]]

    def validate(self, topo: Topology):
        for s in topo.stations:
            if s.id not in self.path_loss:
                raise ConfigError(f"no path-loss parameters for station {s.id}")
            if len(self.patterns.get(s.id, [])) != s.beam_count:
                raise ConfigError(f"station {s.id}: expected {s.beam_count} patterns")

    def arrays(self, keys) -> dict[str, np.ndarray]:
        """Column-aligned parameter arrays for a list of (q, m) keys."""
        out = {k: np.empty(len(keys)) for k in ("alpha", "beta", "sigma", "omega", "eta", "center")}
        for j, (q, m) in enumerate(keys):
            pl = self.path_loss[q]
            bp = self.patterns[q][m]
            out["alpha"][j], out["beta"][j], out["sigma"][j] = pl.alpha, pl.beta, pl.sigma
            out["omega"][j], out["eta"][j], out["center"][j] = bp.omega, bp.eta, bp.center
        return out

    def copy(self) -> "PropagationParams":
        return PropagationParams(dict(self.path_loss), {q: list(v) for q, v in self.patterns.items()})

    def to_dict(self) -> dict:
        return {
            str(q): {
                "alpha": pl.alpha, "beta": pl.beta, "sigma": pl.sigma,
                "beams": {str(m): {"omega": b.omega, "eta": b.eta, "center": b.center}
                          for m, b in enumerate(self.patterns[q])},
            }
            for q, pl in self.path_loss.items()
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropagationParams":
        pl, pat = {}, {}
        for q, e in d.items():
            q = int(q)
            pl[q] = PathLossParams(e["alpha"], e["beta"], e["sigma"])
            beams = e["beams"]
            pat[q] = [BeamPattern(**beams[str(m)]) for m in range(len(beams))]
        return cls(pl, pat)


@dataclass
class Observation:
    t: int
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def stations(self) -> set[int]:
        return {q for q, _ in self.entries}


@dataclass
class MeasurementSeries:
    """Slot-by-key matrix of dB readings; NaN marks an unobserved (q, m).

    Row ``i`` holds slot ``t = i + 1``.
    """

    slot_duration: float
    keys: list[tuple[int, int]]
    values: np.ndarray

    def __post_init__(self):
        self.keys = [(int(q), int(m)) for q, m in self.keys]
        self.values = np.asarray(self.values, dtype=float).reshape(-1, len(self.keys))
        if len(set(self.keys)) != len(self.keys):
            raise ConfigError("duplicate (q, m) keys")
        if self.values.shape[0] < 1:
            raise ConfigError("a series needs at least one slot")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def column(self, q: int, m: int) -> int:
        return self.keys.index((q, m))

    def station_columns(self, q: int) -> list[int]:
        return [j for j, (qq, _) in enumerate(self.keys) if qq == q]

    def station_ids(self) -> list[int]:
        seen = []
        for q, _ in self.keys:
            if q not in seen:
                seen.append(q)
        return seen

    def observation(self, i: int) -> Observation:
        row = self.values[i]
        return Observation(i + 1, {k: float(v) for k, v in zip(self.keys, row) if not np.isnan(v)})

    def observations(self) -> list[Observation]:
        return [self.observation(i) for i in range(self.T)]

    def window(self, start: int, stop: int) -> "MeasurementSeries":
        return MeasurementSeries(self.slot_duration, list(self.keys), self.values[start:stop].copy())

    @classmethod
    def from_observations(cls, observations, slot_duration: float, keys=None) -> "MeasurementSeries":
        obs = list(observations)
        ts = [o.t for o in obs]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("observation slots must be strictly increasing")
        if keys is None:
            keys = sorted({k for o in obs for k in o.entries})
        col = {k: j for j, k in enumerate(keys)}
        vals = np.full((len(obs), len(keys)), np.nan)
        for i, o in enumerate(obs):
            for k, v in o.entries.items():
                vals[i, col[k]] = v
        return cls(slot_duration, list(keys), vals)


def angle_diff(a, b):
    """Signed circular difference ``a - b`` wrapped to (-pi, pi]."""
    d = np.mod(np.asarray(a, dtype=float) - b, TWO_PI)
    d = np.where(d > math.pi, d - TWO_PI, d)
    return float(d) if np.ndim(d) == 0 else d


def mean_rsrp_db(pp: PropagationParams, q: int, m: int, x, topo: Topology) -> float:
    bs = topo.station(q)
    pl = pp.path_loss[q]
    d = distance(x, bs)
    phi = bearing(x, bs)
    return pl.beta + pl.alpha * math.log10(d) + float(pp.patterns[q][m].gain(phi))


def station_geometry(topo: Topology, keys):
    """Positions and height offsets of the station owning each key column."""
    pos = np.array([topo.station(q).position for q, _ in keys], dtype=float).reshape(-1, 2)
    h = np.array([topo.station(q).height_offset for q, _ in keys], dtype=float)
    return pos, h


def mean_matrix(pp: PropagationParams, topo: Topology, keys, points, params=None) -> np.ndarray:
    """Model means for every point and key column, shape (n_points, n_keys)."""
    pos, h = station_geometry(topo, keys)
    a = params if params is not None else pp.arrays(keys)
    d = distances(points, pos, h)
    phi = bearings(points, pos)
    du = angle_diff(phi, a["center"][None, :])
    return a["beta"] + a["alpha"] * np.log10(d) + a["omega"] * np.exp(-a["eta"] * du * du)


def sample_observation(pp: PropagationParams, topo: Topology, x, mask, rng: np.random.Generator,
                       t: int = 1) -> Observation:
    """Noisy readings for the (q, m) pairs in ``mask``; one noise draw per station."""
    noise = {}
    entries = {}
    for q, m in mask:
        if q not in noise:
            noise[q] = rng.normal(0.0, pp.path_loss[q].sigma)
        entries[(q, m)] = mean_rsrp_db(pp, q, m, x, topo) + noise[q]
    return Observation(t, entries)


def log_likelihood_obs(obs: Observation, x, pp: PropagationParams, topo: Topology) -> float:
    total = 0.0
    for (q, m), y in obs.entries.items():
        s = pp.path_loss[q].sigma
        r = y - mean_rsrp_db(pp, q, m, x, topo)
        total += -0.5 * (r / s) ** 2 - math.log(s) - HALF_LOG_2PI
    return total


def emission_loglik(series: MeasurementSeries, pp: PropagationParams, topo: Topology, points,
                    rows=None) -> np.ndarray:
    """Log-likelihood of selected slots at each point, shape (n_rows, n_points).

    Uses the expansion sum w*(y - mu)^2 = sum w*y^2 - 2 y.(w*mu) + mask.(w*mu^2)
    so that the work is two matrix products per chunk.
    """
    rows = np.arange(series.T) if rows is None else np.asarray(rows)
    a = pp.arrays(series.keys)
    w = 1.0 / a["sigma"] ** 2
    mu = mean_matrix(pp, topo, series.keys, points, a)
    Y = series.values[rows]
    M = ~np.isnan(Y)
    Y0 = np.where(M, Y, 0.0)
    const = -(M * (np.log(a["sigma"]) + HALF_LOG_2PI)).sum(1) - 0.5 * (w * Y0 * Y0).sum(1)
    cross = (Y0 * w) @ mu.T
    quad = (M * w) @ (mu * mu).T
    return const[:, None] + cross - 0.5 * quad
