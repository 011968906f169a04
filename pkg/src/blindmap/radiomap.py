"""Radio map built from recovered labels, next-slot CSI prediction and its metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import MeasurementSeries, PropagationParams, mean_matrix
from .errors import (ConfigError, DegenerateGamma, EmptyMap, InsufficientData, InsufficientHistory,
                     KTooLarge, LengthMismatch, ZeroEnergy)
from .estimators import estimate_mobility
from .mobility import MobilityParams, Trajectory, predicted_mean
from .topology import Topology
from .trajectory import EmissionModel, GridGraph, PruneConfig, refine_gradient, viterbi2


@dataclass
class RadioMapEntry:
    location: np.ndarray
    ssb_rsrp: dict
    csi_records: dict = field(default_factory=dict)

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float).reshape(2)
        if not np.all(np.isfinite(self.location)):
            raise ConfigError("map entry location must be finite")
        if not self.ssb_rsrp:
            raise ConfigError("map entry needs at least one SSB reading")
        self.csi_records = {int(q): np.asarray(v, dtype=float) for q, v in self.csi_records.items()}

    def to_dict(self) -> dict:
        return {
            "location": self.location.tolist(),
            "ssb": [[q, m, float(v)] for (q, m), v in sorted(self.ssb_rsrp.items())],
            "csi": {str(q): v.tolist() for q, v in sorted(self.csi_records.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadioMapEntry":
        ssb = {(int(q), int(m)): float(v) for q, m, v in d["ssb"]}
        csi = {int(q): np.asarray(v, dtype=float) for q, v in d.get("csi", {}).items()}
        return cls(np.asarray(d["location"], dtype=float), ssb, csi)


def csi_tensor(csi_series: MeasurementSeries):
    """Reshape a CSI series into (T, Q, B) with its station order; stations must share B."""
    ids = csi_series.station_ids()
    cols = [csi_series.station_columns(q) for q in ids]
    if len({len(c) for c in cols}) != 1:
        raise ConfigError("every station needs the same number of CSI beams")
    return csi_series.values[:, np.array(cols)], ids


def build_map(recovered: Trajectory, series: MeasurementSeries, csi_series: MeasurementSeries | None = None,
              existing=None) -> list[RadioMapEntry]:
    """One entry per slot with at least one SSB reading, appended to ``existing``."""
    T = len(recovered)
    if series.T != T or (csi_series is not None and csi_series.T != T):
        raise LengthMismatch(f"trajectory has {T} slots, series {series.T}"
                             + ("" if csi_series is None else f", csi {csi_series.T}"))
    out = list(existing) if existing is not None else []
    csi_ids = csi_series.station_ids() if csi_series is not None else []
    csi_cols = {q: csi_series.station_columns(q) for q in csi_ids}
    M = series.mask
    for i in range(T):
        ssb = {k: float(series.values[i, j]) for j, k in enumerate(series.keys) if M[i, j]}
        if not ssb:
            continue
        csi = {q: csi_series.values[i, c].copy() for q, c in csi_cols.items()}
        out.append(RadioMapEntry(recovered.positions[i], ssb, csi))
    return out


def save_map(path, entries, append: bool = False):
    """JSON lines, one entry per line."""
    with open(path, "a" if append else "w") as f:
        for e in entries:
            f.write(json.dumps(e.to_dict()) + "\n")


def load_map(path) -> list[RadioMapEntry]:
    with open(path) as f:
        return [RadioMapEntry.from_dict(json.loads(line)) for line in f if line.strip()]


class FingerprintIndex:
    """Dense view of a map over fixed SSB keys for repeated nearest-entry queries."""

    def __init__(self, entries, keys=None):
        self.entries = list(entries)
        if not self.entries:
            raise EmptyMap("radio map is empty")
        if keys is None:
            keys = sorted({k for e in self.entries for k in e.ssb_rsrp})
        self.keys = [tuple(k) for k in keys]
        col = {k: j for j, k in enumerate(self.keys)}
        self.values = np.full((len(self.entries), len(self.keys)), np.nan)
        for i, e in enumerate(self.entries):
            for k, v in e.ssb_rsrp.items():
                j = col.get(k)
                if j is not None:
                    self.values[i, j] = v
        self.locations = np.array([e.location for e in self.entries])

    def distances(self, query: dict) -> np.ndarray:
        """Mean squared difference over shared keys; inf for entries sharing none."""
        col = {k: j for j, k in enumerate(self.keys)}
        js, qv = [], []
        for k, v in query.items():
            if k in col and math.isfinite(v):
                js.append(col[k])
                qv.append(v)
        if not js:
            return np.full(len(self.entries), np.inf)
        diff = self.values[:, js] - np.array(qv)[None, :]
        ok = ~np.isnan(diff)
        n = ok.sum(1)
        sq = np.where(ok, diff * diff, 0.0).sum(1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, sq / np.maximum(n, 1), np.inf)

    def nearest(self, query: dict) -> int:
        """Index of the closest entry; ties go to the smallest location (x, then y)."""
        d = self.distances(query)
        if not np.isfinite(d).any():
            raise EmptyMap("no map entry shares a key with the query")
        order = np.lexsort((self.locations[:, 1], self.locations[:, 0], d))
        return int(order[0])


@dataclass(frozen=True)
class PredictConfig:
    history_len: int = 12
    iters: int = 3
    refine_iters: int = 100
    lr: float = 0.01
    refine_method: str = "lbfgs"
    prune: PruneConfig = PruneConfig()
    min_accel_var: float = 1e-4


@dataclass
class Prediction:
    x_next: np.ndarray
    y_hat: dict
    entry: RadioMapEntry
    window: Trajectory
    mobility: MobilityParams


def extrapolate(positions, mp: MobilityParams) -> np.ndarray:
    """x_{t+1} = (1 + gamma) x_t - gamma x_{t-1} + (1 - gamma) delta v_bar."""
    p = np.asarray(positions, dtype=float)
    return predicted_mean(p[-1], p[-2], mp)


def window_fit(window: MeasurementSeries, pp: PropagationParams, mp: MobilityParams, topo: Topology,
               graph: GridGraph, cfg: PredictConfig = PredictConfig(), emission: EmissionModel | None = None):
    """Alternate window decoding and the closed-form mobility update, Theta_p fixed."""
    em = emission.with_series(window) if emission is not None else EmissionModel(window, pp, topo, graph)
    traj = None
    for _ in range(max(1, cfg.iters)):
        path = viterbi2(window, pp, mp, graph, cfg.prune, emission=em)
        new = refine_gradient(path, window, pp, mp, topo, cfg.lr, cfg.refine_iters, method=cfg.refine_method,
                              bounds=graph.bounds)
        converged = traj is not None and np.allclose(new.positions, traj.positions)
        traj = new
        try:
            v, s2 = estimate_mobility(traj, mp.gamma, mp.slot)
        except (DegenerateGamma, InsufficientData):
            break
        mp = MobilityParams(tuple(v), max(s2, cfg.min_accel_var), mp.gamma, mp.slot)
        if converged:
            break
    return traj, mp


def predict_next(history: MeasurementSeries, radio_map, pp: PropagationParams, mp: MobilityParams,
                 topo: Topology, graph: GridGraph, cfg: PredictConfig = PredictConfig(),
                 emission: EmissionModel | None = None) -> Prediction:
    """Predict the next-slot SSB means and return the nearest map entry (with its CSI).

    ``radio_map`` is a list of entries or a FingerprintIndex. The model predicts every
    key of the series, so beams missing from the recent reports still take part.
    """
    L = cfg.history_len
    if history.T < L + 1:
        raise InsufficientHistory(f"need {L + 1} slots, got {history.T}")
    index = radio_map if isinstance(radio_map, FingerprintIndex) else FingerprintIndex(radio_map)
    window = history.window(history.T - L - 1, history.T)
    traj, mp_w = window_fit(window, pp, mp, topo, graph, cfg, emission)
    x_next = extrapolate(traj.positions, mp_w)
    keys = list(window.keys)
    mu = mean_matrix(pp, topo, keys, x_next[None, :])[0]
    y_hat = dict(zip(keys, mu.tolist()))
    entry = index.entries[index.nearest(y_hat)]
    return Prediction(x_next, y_hat, entry, traj, mp_w)


# ---------------------------------------------------------------- metrics

def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[None, :], truth[None, :]
    return pred.reshape(-1, pred.shape[-1]), truth.reshape(-1, truth.shape[-1])


def top_k(values, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties by beam index."""
    v = np.asarray(values, dtype=float)
    return np.argsort(-v, axis=-1, kind="stable")[..., :k]


def metric_eq(pred, truth, k: int) -> float:
    """Mean over (n, q) of 1 - |top-k(pred) & top-k(truth)| / k."""
    p, t = _check_pair(pred, truth)
    if k < 1 or k > p.shape[1]:
        raise KTooLarge(f"k={k} with {p.shape[1]} beams")
    a, b = top_k(p, k), top_k(t, k)
    hit = (a[:, :, None] == b[:, None, :]).any(2).sum(1)
    return float(np.mean(1.0 - hit / k))


def metric_ee(pred, truth, k: int) -> float:
    """Mean over (n, q) of |e - e_hat| / e, e the linear energy of the k strongest beams."""
    p, t = _check_pair(pred, truth)
    if k < 1 or k > p.shape[1]:
        raise KTooLarge(f"k={k} with {p.shape[1]} beams")
    lp, lt = 10.0 ** (p / 10.0), 10.0 ** (t / 10.0)
    e_hat = np.take_along_axis(lp, top_k(p, k), 1).sum(1)
    e = np.take_along_axis(lt, top_k(t, k), 1).sum(1)
    if np.any(e <= 0):
        raise ZeroEnergy("true top-k energy is zero")
    return float(np.mean(np.abs(e - e_hat) / e))


def metric_ea(pred, truth) -> float:
    """Mean absolute error of the strongest-beam value (dB)."""
    p, t = _check_pair(pred, truth)
    return float(np.mean(np.abs(p.max(1) - t.max(1))))


# ---------------------------------------------------------------- baselines

def baseline_mi(history, L: int = 12) -> np.ndarray:
    """y_t plus the mean per-beam increment over the last L steps.

    Missing readings (NaN) drop out of the increment mean; a beam missing at t stays NaN.
    """
    h = np.asarray(history, dtype=float)
    if h.shape[0] < L + 1:
        raise InsufficientHistory(f"need {L + 1} slots, got {h.shape[0]}")
    w = h[-(L + 1):]
    d = np.diff(w, axis=0)
    n = (~np.isnan(d)).sum(0)
    with np.errstate(invalid="ignore"):
        inc = np.where(n > 0, np.nansum(d, axis=0) / np.maximum(n, 1), 0.0)
    return w[-1] + inc


@dataclass
class ARModel:
    coef: np.ndarray  # (B, L); coef[:, 0] multiplies y_{t-L+1}, coef[:, -1] multiplies y_t
    intercept: np.ndarray

    @property
    def order(self) -> int:
        return self.coef.shape[1]

    def predict(self, history) -> np.ndarray:
        h = np.asarray(history, dtype=float)
        L = self.order
        if h.shape[0] < L:
            raise InsufficientHistory(f"need {L} slots, got {h.shape[0]}")
        return (self.coef * h[-L:].T).sum(1) + self.intercept


def fit_ar(train, L: int = 12) -> ARModel:
    """Per-beam order-L linear autoregression with intercept, by least squares.

    Only windows without missing readings are used; a beam with too few of them gets
    NaN coefficients and predicts NaN.
    """
    y = np.asarray(train, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0] - L
    if n < L + 1 or not np.isfinite(y).any():
        raise InsufficientData(f"AR({L}) needs more than {2 * L} training slots")
    coef = np.empty((y.shape[1], L))
    icpt = np.empty(y.shape[1])
    for b in range(y.shape[1]):
        X = np.column_stack([y[i:i + n, b] for i in range(L)] + [np.ones(n)])
        z = y[L:, b]
        ok = np.isfinite(X).all(1) & np.isfinite(z)
        if ok.sum() < L + 1:
            coef[b], icpt[b] = np.nan, np.nan
            continue
        sol = np.linalg.lstsq(X[ok], z[ok], rcond=None)[0]
        coef[b], icpt[b] = sol[:L], sol[L]
    return ARModel(coef, icpt)


def baseline_ar(history, L: int = 12, train=None) -> np.ndarray:
    """One-step AR(L) forecast; ``train`` is a training series or a fitted ARModel."""
    model = train if isinstance(train, ARModel) else fit_ar(history if train is None else train, L)
    return model.predict(history)
