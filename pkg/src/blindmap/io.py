"""File formats: topology/parameter JSON, series and trajectory CSV, curve CSV."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .channel import MeasurementSeries, PropagationParams
from .errors import ConfigError
from .mobility import MobilityParams, Trajectory
from .topology import Topology


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def save_topology(path, topo: Topology):
    write_json(path, topo.to_dict())


def load_topology(path) -> Topology:
    return Topology.from_dict(read_json(path))


def save_params(path, pp: PropagationParams, mp: MobilityParams | None = None):
    d = {"propagation": pp.to_dict()}
    if mp is not None:
        d["mobility"] = mobility_to_dict(mp)
    write_json(path, d)


def load_params(path):
    """Returns (PropagationParams, MobilityParams or None)."""
    d = read_json(path)
    pp = PropagationParams.from_dict(d["propagation"])
    mp = mobility_from_dict(d["mobility"]) if "mobility" in d else None
    return pp, mp


def mobility_to_dict(mp: MobilityParams) -> dict:
    return {"mean_velocity": list(map(float, mp.mean_velocity)), "accel_var": float(mp.accel_var),
            "gamma": float(mp.gamma), "slot": float(mp.slot)}


def mobility_from_dict(d) -> MobilityParams:
    return MobilityParams(tuple(d["mean_velocity"]), float(d["accel_var"]), float(d["gamma"]), float(d["slot"]))


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_suffix(p.suffix + ".json")


def save_series(path, series: MeasurementSeries):
    """Rows ``t,q,m,y_db`` for observed entries only, plus a JSON sidecar with slot and keys."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "q", "m", "y_db"])
        for i in range(series.T):
            for j, (q, m) in enumerate(series.keys):
                v = series.values[i, j]
                if not math.isnan(v):
                    w.writerow([i + 1, q, m, repr(float(v))])
    write_json(_sidecar(path), {"slot_duration": series.slot_duration, "T": series.T,
                                "keys": [list(k) for k in series.keys]})


def load_series(path) -> MeasurementSeries:
    side = _sidecar(path)
    meta = read_json(side) if side.exists() else {}
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append((int(r["t"]), int(r["q"]), int(r["m"]), float(r["y_db"])))
    if "keys" in meta:
        keys = [tuple(k) for k in meta["keys"]]
    else:
        keys = sorted({(q, m) for _, q, m, _ in rows})
    T = int(meta.get("T", max((r[0] for r in rows), default=0)))
    if T < 1:
        raise ConfigError(f"{path}: no slots")
    col = {k: j for j, k in enumerate(keys)}
    vals = np.full((T, len(keys)), np.nan)
    for t, q, m, y in rows:
        if (q, m) not in col or not 1 <= t <= T:
            raise ConfigError(f"{path}: row t={t} q={q} m={m} outside the declared series")
        vals[t - 1, col[(q, m)]] = y
    return MeasurementSeries(float(meta.get("slot_duration", 1.0)), keys, vals)


def save_trajectory(path, traj):
    p = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y"])
        for i, (x, y) in enumerate(p):
            w.writerow([i + 1, repr(float(x)), repr(float(y))])


def load_trajectory(path) -> Trajectory:
    with open(path, newline="") as f:
        rows = sorted((int(r["t"]), float(r["x"]), float(r["y"])) for r in csv.DictReader(f))
    if not rows:
        raise ConfigError(f"{path}: empty trajectory")
    return Trajectory(np.array([[x, y] for _, x, y in rows]))


def save_curve(path, xs, ys, header=("T", "value")):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(header))
        for x, y in zip(xs, ys):
            w.writerow([x, repr(float(y))])


def save_table(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(header))
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
