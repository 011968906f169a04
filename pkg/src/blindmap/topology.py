"""Base-station layouts, distances, bearings and visibility sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CoincidentPoint, ConfigError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class BaseStation:
    id: int
    position: tuple[float, float]
    beam_count: int = 1
    height_offset: float = 0.0

    def __post_init__(self):
        if self.beam_count < 1:
            raise ConfigError(f"station {self.id}: beam_count must be >= 1")
        if not all(math.isfinite(c) for c in self.position):
            raise ConfigError(f"station {self.id}: non-finite position")
        if self.height_offset < 0:
            raise ConfigError(f"station {self.id}: negative height offset")
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class Topology:
    """Stations plus the rectangle ``(x0, y0, x1, y1)`` they live in.

    ``connect_radius`` may be ``math.inf`` (every station heard in every slot).
    """

    stations: tuple[BaseStation, ...]
    region: tuple[float, float, float, float]
    connect_radius: float = math.inf
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        ids = [s.id for s in self.stations]
        if len(set(ids)) != len(ids):
            raise ConfigError("station ids must be unique")
        x0, y0, x1, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"degenerate region {self.region}")
        if not self.connect_radius > 0:
            raise ConfigError("connect_radius must be positive")
        object.__setattr__(self, "_index", {s.id: s for s in self.stations})

    def __len__(self):
        return len(self.stations)

    def station(self, q: int) -> BaseStation:
        return self._index[q]

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.stations]

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.stations], dtype=float).reshape(-1, 2)

    @property
    def heights(self) -> np.ndarray:
        return np.array([s.height_offset for s in self.stations], dtype=float)

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.region
        return (x1 - x0) * (y1 - y0)

    def beam_keys(self) -> list[tuple[int, int]]:
        """All (station, beam) pairs in station order."""
        return [(s.id, m) for s in self.stations for m in range(s.beam_count)]

    def to_dict(self) -> dict:
        x0, y0, x1, y1 = self.region
        return {
            "stations": [
                {"id": s.id, "x": s.position[0], "y": s.position[1],
                 "h": s.height_offset, "beams": s.beam_count}
                for s in self.stations
            ],
            "region": {"x0": x0, "y0": y0, "x1": x1, "y1": y1},
            "radius": None if math.isinf(self.connect_radius) else self.connect_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        st = [BaseStation(int(s["id"]), (s["x"], s["y"]), int(s.get("beams", 1)), float(s.get("h", 0.0)))
              for s in d["stations"]]
        r = d["region"]
        radius = d.get("radius")
        return cls(tuple(st), (r["x0"], r["y0"], r["x1"], r["y1"]),
                   math.inf if radius is None else float(radius))


def distance(x, bs: BaseStation) -> float:
    dx = float(x[0]) - bs.position[0]
    dy = float(x[1]) - bs.position[1]
    return math.sqrt(dx * dx + dy * dy + bs.height_offset ** 2)


def bearing(x, bs: BaseStation) -> float:
    """Counter-clockwise angle of ``x - o_q`` from the +x axis, in [0, 2pi)."""
    dx = float(x[0]) - bs.position[0]
    dy = float(x[1]) - bs.position[1]
    if dx == 0.0 and dy == 0.0:
        raise CoincidentPoint(f"point coincides with station {bs.id}")
    a = math.atan2(dy, dx) % TWO_PI
    # atan2 of a tiny negative dy can round up to exactly 2pi
    return 0.0 if a >= TWO_PI else a


def distances(points, positions, heights=None) -> np.ndarray:
    """Pairwise distances, shape (n_points, n_stations)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    d2 = ((pts[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    if heights is not None:
        d2 = d2 + np.asarray(heights, dtype=float)[None, :] ** 2
    return np.sqrt(d2)


def bearings(points, positions) -> np.ndarray:
    """Pairwise bearings in [0, 2pi); coincident pairs map to 0 without raising."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    diff = pts[:, None, :] - pos[None, :, :]
    a = np.mod(np.arctan2(diff[..., 1], diff[..., 0]), TWO_PI)
    a[a >= TWO_PI] = 0.0
    return a


def visible_bs(topology: Topology, x) -> set[int]:
    if math.isinf(topology.connect_radius):
        return set(topology.ids)
    return {s.id for s in topology.stations if distance(x, s) <= topology.connect_radius}


def sample_ppp(density: float, region, rng: np.random.Generator, *, beam_count: int = 1,
               height_offset: float = 0.0, connect_radius: float = math.inf) -> Topology:
    """Homogeneous Poisson layout with ``density`` stations per square meter."""
    if density < 0:
        raise ConfigError("density must be non-negative")
    x0, y0, x1, y1 = region
    area = (x1 - x0) * (y1 - y0)
    n = rng.poisson(density * area)
    xs = rng.uniform(x0, x1, size=n)
    ys = rng.uniform(y0, y1, size=n)
    stations = tuple(BaseStation(i, (xs[i], ys[i]), beam_count, height_offset) for i in range(n))
    return Topology(stations, tuple(region), connect_radius)


def padded_region(points, pad: float) -> tuple[float, float, float, float]:
    """Bounding box of ``points`` grown by ``pad`` on every side."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
