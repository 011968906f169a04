"""Trajectory recovery: grid graphs, second-order Viterbi, gradient refinement and
the alternating recovery loop, plus the MaR/WCL baselines and the error metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .channel import (LN10, HALF_LOG_2PI, BeamPattern, MeasurementSeries, PathLossParams,
                      PropagationParams, angle_diff, mean_matrix, station_geometry)
from .errors import (ConfigError, DegenerateGamma, EmptyRegion, LengthMismatch, NoFeasiblePath,
                     NotAdjacent)
from .estimators import PatternFitConfig, estimate_mobility, fit_propagation, propagation_loglik
from .mobility import MobilityParams, Trajectory, transition_loglik, transition_residuals
from .topology import TWO_PI, Topology

KMH = 1.0 / 3.6


# ---------------------------------------------------------------- grid graph

@dataclass
class GridGraph:
    """Candidate locations with a padded K-hop neighbour table.

    ``nbr[i, :nbr_count[i]]`` lists the neighbours of vertex ``i`` in ascending id order;
    a vertex is always its own neighbour (the user may stand still).
    """

    spacing: float
    vertices: np.ndarray
    hop_limit: int
    nbr: np.ndarray
    nbr_count: np.ndarray
    shape: tuple | None = None

    def __post_init__(self):
        if self.hop_limit < 1:
            raise ConfigError("hop_limit must be >= 1")
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)

    def __len__(self):
        return len(self.vertices)

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbr[i, :self.nbr_count[i]]

    @property
    def bounds(self) -> tuple:
        """Bounding box (x0, y0, x1, y1) of the vertices."""
        lo, hi = self.vertices.min(0), self.vertices.max(0)
        return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    @property
    def n_edges(self) -> int:
        return int(self.nbr_count.sum())

    def nearest(self, points) -> np.ndarray:
        """Index of the closest vertex for each point."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.shape is not None:
            ny, nx = self.shape
            x0, y0 = self.vertices[0]
            ix = np.clip(np.rint((pts[:, 0] - x0) / self.spacing), 0, nx - 1).astype(int)
            iy = np.clip(np.rint((pts[:, 1] - y0) / self.spacing), 0, ny - 1).astype(int)
            return iy * nx + ix
        out = np.empty(len(pts), dtype=int)
        for k, p in enumerate(pts):
            out[k] = int(np.argmin(((self.vertices - p) ** 2).sum(1)))
        return out

    @classmethod
    def from_adjacency(cls, vertices, adjacency, spacing: float = 1.0, hop_limit: int = 1):
        """Build from explicit neighbour lists (each list should contain the vertex itself)."""
        adj = [sorted(set(int(j) for j in a)) for a in adjacency]
        for i, a in enumerate(adj):
            for j in a:
                if i not in adj[j]:
                    raise ConfigError("adjacency must be symmetric")
        width = max(len(a) for a in adj)
        nbr = np.full((len(adj), width), -1, dtype=np.int64)
        for i, a in enumerate(adj):
            nbr[i, :len(a)] = a
        return cls(spacing, vertices, hop_limit, nbr, np.array([len(a) for a in adj]))


def hop_limit(tau: float, v_max: float, delta: float) -> int:
    return max(1, math.ceil(delta * v_max / tau - 1e-9))


def build_grid(region=None, tau: float = 1.0, v_max: float = 120 * KMH, delta: float = 0.5,
               polyline=None) -> GridGraph:
    """Square lattice over ``region`` or equispaced samples along ``polyline``.

    ``v_max`` is in m/s. Lattice neighbours are within Chebyshev distance K, polyline
    neighbours within index distance K.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    K = hop_limit(tau, v_max, delta)
    if polyline is not None:
        pts = _sample_polyline(polyline, tau)
        n = len(pts)
        if n == 0:
            raise EmptyRegion("empty polyline")
        width = 2 * K + 1
        nbr = np.full((n, width), -1, dtype=np.int64)
        cnt = np.zeros(n, dtype=np.int64)
        for i in range(n):
            ids = np.arange(max(0, i - K), min(n, i + K + 1))
            nbr[i, :len(ids)] = ids
            cnt[i] = len(ids)
        return GridGraph(tau, pts, K, nbr, cnt)
    x0, y0, x1, y1 = region
    nx = int(math.floor((x1 - x0) / tau + 1e-9)) + 1
    ny = int(math.floor((y1 - y0) / tau + 1e-9)) + 1
    if x1 < x0 or y1 < y0 or nx < 1 or ny < 1:
        raise EmptyRegion(f"region {region} holds no grid points")
    gx, gy = np.meshgrid(x0 + tau * np.arange(nx), y0 + tau * np.arange(ny))
    verts = np.column_stack([gx.ravel(), gy.ravel()])
    iy, ix = np.divmod(np.arange(nx * ny), nx)
    offs = np.arange(-K, K + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    jy = iy[:, None] + dy[None, :]
    jx = ix[:, None] + dx[None, :]
    ok = (jy >= 0) & (jy < ny) & (jx >= 0) & (jx < nx)
    ids = np.where(ok, jy * nx + jx, -1)
    # offsets are in row-major order so valid ids stay ascending; push -1 to the back
    order = np.argsort(~ok, axis=1, kind="stable")
    nbr = np.take_along_axis(ids, order, axis=1)
    return GridGraph(tau, verts, K, nbr, ok.sum(1), shape=(ny, nx))


def _sample_polyline(polyline, tau):
    p = np.asarray(polyline, dtype=float).reshape(-1, 2)
    if len(p) == 1:
        return p.copy()
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(math.floor(s[-1] / tau + 1e-9)) + 1
    u = tau * np.arange(n)
    return np.column_stack([np.interp(u, s, p[:, 0]), np.interp(u, s, p[:, 1])])


# ---------------------------------------------------------------- transitions

def _log_density(points, mean, var):
    r = points - mean
    return -math.log(2.0 * math.pi * var) - 0.5 * (r * r).sum(-1) / var


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def transition_table(graph: GridGraph, prev2_ids, prev_ids, mp: MobilityParams) -> np.ndarray:
    """Normalised log-probabilities over the neighbourhood of each ``prev``; -inf on padding."""
    if mp.gamma >= 1.0:
        raise DegenerateGamma("grid transitions need gamma < 1")
    V = graph.vertices
    a = np.asarray(prev2_ids)
    b = np.asarray(prev_ids)
    mean = (1.0 + mp.gamma) * V[b] - mp.gamma * V[a] + mp.drift()
    nb = graph.nbr[b]
    valid = nb >= 0
    ld = _log_density(V[np.where(valid, nb, 0)], mean[:, None, :], mp.step_var)
    ld = np.where(valid, ld, -np.inf)
    return ld - _logsumexp(ld)[:, None]


def discretize_transition(x_t: int, x_prev: int, x_prev2: int, mp: MobilityParams,
                          graph: GridGraph) -> float:
    """Probability of vertex ``x_t`` given the two previous vertices on the grid."""
    nb = graph.neighbors(x_prev)
    hit = np.nonzero(nb == x_t)[0]
    if len(hit) == 0:
        raise NotAdjacent(f"{x_t} is not within {graph.hop_limit} hops of {x_prev}")
    row = transition_table(graph, [x_prev2], [x_prev], mp)[0]
    return float(np.exp(row[hit[0]]))


# ---------------------------------------------------------------- emissions

class EmissionModel:
    """Per-slot emission log-likelihood on grid vertices, evaluated lazily."""

    def __init__(self, series: MeasurementSeries, pp: PropagationParams, topo: Topology,
                 graph: GridGraph):
        a = pp.arrays(series.keys)
        self.mu = mean_matrix(pp, topo, series.keys, graph.vertices, a)
        self.mu2 = self.mu * self.mu
        self._sigma = a["sigma"]
        self.keys = list(series.keys)
        self._load(series)

    def with_series(self, series: MeasurementSeries) -> "EmissionModel":
        """Same propagation means applied to another series over the same keys."""
        if list(series.keys) != self.keys:
            raise ConfigError("series keys differ from the emission model keys")
        out = object.__new__(EmissionModel)
        out.mu, out.mu2, out._sigma, out.keys = self.mu, self.mu2, self._sigma, self.keys
        out._load(series)
        return out

    def _load(self, series: MeasurementSeries):
        sigma = self._sigma
        w = 1.0 / sigma ** 2
        M = series.mask
        Y0 = np.where(M, series.values, 0.0)
        self.yw = Y0 * w
        self.mw = 0.5 * M * w
        self.const = (-(M * (np.log(sigma) + HALF_LOG_2PI)).sum(1)
                      - 0.5 * (w * Y0 * Y0).sum(1))

    def slot(self, t: int, ids=None) -> np.ndarray:
        """Emission log-likelihood of 0-based slot ``t`` at vertices ``ids`` (all if None)."""
        if ids is None:
            return self.const[t] + self.mu @ self.yw[t] - self.mu2 @ self.mw[t]
        return self.const[t] + self.mu[ids] @ self.yw[t] - self.mu2[ids] @ self.mw[t]


# ---------------------------------------------------------------- Viterbi

@dataclass(frozen=True)
class PruneConfig:
    """State retention per slot.

    ``mode="threshold"`` keeps n_t states where n_t counts candidate vertices whose emission
    likelihood relative to the slot maximum exceeds ``zeta``, clipped to [n_min, n_max].
    ``mode="top-n"`` keeps exactly ``n`` states and ``mode="none"`` keeps everything.
    """

    zeta: float = 0.8
    mode: str = "threshold"
    n: int = 0
    n_min: int = 200
    n_max: int = 2000

    def budget(self, emis: np.ndarray) -> int | None:
        if self.mode == "none":
            return None
        if self.mode == "top-n":
            return max(1, int(self.n))
        if self.mode != "threshold":
            raise ConfigError(f"unknown prune mode {self.mode!r}")
        e = emis[np.isfinite(emis)]
        if len(e) == 0:
            return self.n_min
        cnt = int((np.exp(e - e.max()) > self.zeta).sum())
        return int(min(max(cnt, self.n_min), self.n_max))


NO_PRUNE = PruneConfig(mode="none")


def _keep_top(score, n, *tiebreak):
    """Indices of the ``n`` best scores, ties broken by the ascending ``tiebreak`` keys."""
    if n is None or len(score) <= n:
        return np.arange(len(score))
    order = np.lexsort(tuple(reversed(tiebreak)) + (-score,))
    return np.sort(order[:n])


@dataclass
class ViterbiStats:
    expansions: list = field(default_factory=list)
    states: list = field(default_factory=list)
    score: float = -math.inf


def viterbi2(series: MeasurementSeries, pp: PropagationParams, mp: MobilityParams,
             graph: GridGraph, prune: PruneConfig = PruneConfig(), topo: Topology | None = None,
             *, emission: EmissionModel | None = None, stats: ViterbiStats | None = None) -> Trajectory:
    """MAP vertex sequence under emissions plus normalised second-order grid transitions.

    State at slot t is the vertex pair (x_{t-1}, x_t). Slots 1 and 2 carry emission
    scores only; each later slot adds log P(x_t | x_{t-1}, x_{t-2}).
    """
    if emission is None:
        if topo is None:
            raise ConfigError("viterbi2 needs a topology or a prebuilt emission model")
        emission = EmissionModel(series, pp, topo, graph)
    T = series.T
    nV = len(graph)
    e1 = emission.slot(0)
    if T == 1:
        best = int(np.lexsort((np.arange(nV), -e1))[0])
        if stats is not None:
            stats.score = float(e1[best])
        return Trajectory(graph.vertices[[best]])

    # slot 1: single vertices
    keep = _keep_top(e1, prune.budget(e1), np.arange(nV))
    v1, s1 = keep, e1[keep]
    # slot 2: pairs (a, b) with b a neighbour of a
    nb = graph.nbr[v1]
    a = np.repeat(v1, nb.shape[1])
    b = nb.ravel()
    ok = b >= 0
    a, b = a[ok], b[ok]
    cand = np.unique(b)
    e2 = np.full(nV, -np.inf)
    e2[cand] = emission.slot(1, cand)
    score = np.repeat(s1, nb.shape[1])[ok] + e2[b]
    keep = _keep_top(score, prune.budget(e2[cand]), b, a)
    A, B, S = a[keep], b[keep], score[keep]
    hist = [(A, B, np.full(len(A), -1))]
    if stats is not None:
        stats.expansions.append(len(score))
        stats.states.append(len(A))

    for t in range(2, T):
        logp = transition_table(graph, A, B, mp)
        nb = graph.nbr[B]
        valid = nb >= 0
        src = np.broadcast_to(np.arange(len(B))[:, None], nb.shape)[valid]
        c = nb[valid]
        cand = np.unique(c)
        et = emission.slot(t, cand)
        lookup = np.full(nV, -np.inf)
        lookup[cand] = et
        tot = S[src] + logp[valid] + lookup[c]
        prev_b = B[src]
        # best predecessor per (x_{t-1}, x_t); ties go to the smallest x_{t-2}
        key = prev_b * nV + c
        order = np.lexsort((A[src], -tot, key))
        first = np.ones(len(order), dtype=bool)
        first[1:] = key[order][1:] != key[order][:-1]
        win = order[first]
        fin = np.isfinite(tot[win])
        win = win[fin]
        if len(win) == 0:
            raise NoFeasiblePath(f"no finite-score state at slot {t + 1}")
        nb_, nc_, ns_ = prev_b[win], c[win], tot[win]
        keep = _keep_top(ns_, prune.budget(et), nc_, nb_)
        A, B, S = nb_[keep], nc_[keep], ns_[keep]
        hist.append((A, B, src[win][keep]))
        if stats is not None:
            stats.expansions.append(len(tot))
            stats.states.append(len(A))

    # best final state; ties by (x_T, x_{T-1}) ascending
    k = int(np.lexsort((A, B, -S))[0])
    if stats is not None:
        stats.score = float(S[k])
    path = np.empty(T, dtype=np.int64)
    for t in range(T - 1, 0, -1):
        Ah, Bh, back = hist[t - 1]
        path[t] = Bh[k]
        path[t - 1] = Ah[k]
        k = back[k]
    return Trajectory(graph.vertices[path])


def path_score(ids, emission: EmissionModel, graph: GridGraph, mp: MobilityParams) -> float:
    """Discrete objective of a vertex path (emissions plus normalised transitions)."""
    ids = [int(i) for i in ids]
    s = sum(float(emission.slot(t, [v])[0]) for t, v in enumerate(ids))
    for t in range(2, len(ids)):
        s += math.log(discretize_transition(ids[t], ids[t - 1], ids[t - 2], mp, graph))
    return s


# ---------------------------------------------------------------- continuous objective

def emission_terms(series: MeasurementSeries, pp: PropagationParams, topo: Topology, positions,
                   params=None, grad: bool = False):
    """Per-slot emission log-likelihood along ``positions``; optionally its gradient (T, 2)."""
    keys = series.keys
    a = params if params is not None else pp.arrays(keys)
    ids = sorted({q for q, _ in keys})
    col = np.array([ids.index(q) for q, _ in keys])
    spos = np.array([topo.station(q).position for q in ids], dtype=float).reshape(-1, 2)
    sh = np.array([topo.station(q).height_offset for q in ids], dtype=float)
    x = np.asarray(positions, dtype=float)
    # geometry once per station, then spread to that station's beam columns
    sdiff = x[:, None, :] - spos[None, :, :]
    srho2 = (sdiff * sdiff).sum(-1)
    sd2 = srho2 + sh[None, :] ** 2
    sphi = np.mod(np.arctan2(sdiff[..., 1], sdiff[..., 0]), TWO_PI)
    diff, rho2, d2, phi = sdiff[:, col], srho2[:, col], sd2[:, col], sphi[:, col]
    du = angle_diff(phi, a["center"][None, :])
    g = a["omega"] * np.exp(-a["eta"] * du * du)
    mu = a["beta"] + 0.5 * a["alpha"] * np.log10(d2) + g
    M = series.mask
    w = 1.0 / a["sigma"] ** 2
    r = np.where(M, series.values - mu, 0.0)
    ll = -0.5 * (w * r * r).sum(1) - (M * (np.log(a["sigma"]) + HALF_LOG_2PI)).sum(1)
    if not grad:
        return ll
    rho2s = np.where(rho2 > 0, rho2, 1.0)
    dmu_pl = (a["alpha"] / LN10)[None, :, None] * diff / d2[..., None]
    dphi = np.stack([-diff[..., 1], diff[..., 0]], -1) / rho2s[..., None]
    dmu_bp = (-2.0 * a["eta"] * du * g)[..., None] * dphi
    gr = ((w * r)[..., None] * (dmu_pl + dmu_bp)).sum(1)
    return ll, gr


def objective(series, pp, mp, topo, positions) -> float:
    """Joint log-likelihood: emissions over all slots plus transitions for t >= 3."""
    return float(emission_terms(series, pp, topo, positions).sum() + transition_loglik(positions, mp))


def objective_grad(series, pp, mp, topo, positions, params=None):
    ll, gr = emission_terms(series, pp, topo, positions, params, grad=True)
    x = np.asarray(positions, dtype=float)
    val = float(ll.sum())
    if len(x) >= 3:
        var = mp.step_var
        r = transition_residuals(x, mp.gamma, mp.slot, mp.v)
        val += float(-len(r) * math.log(2.0 * math.pi * var) - 0.5 * (r * r).sum() / var)
        rv = r / var
        gr = gr.copy()
        gr[2:] -= rv
        gr[1:-1] += (1.0 + mp.gamma) * rv
        gr[:-2] -= mp.gamma * rv
    return val, gr


def refine_gradient(traj0: Trajectory, series: MeasurementSeries, pp: PropagationParams,
                    mp: MobilityParams, topo: Topology, lr: float = 0.01, iters: int = 200,
                    tol: float = 1e-8, trace: list | None = None, method: str = "lbfgs",
                    bounds=None) -> Trajectory:
    """Continuous ascent from ``traj0``; the objective never decreases.

    ``method="gradient"`` takes normalised steps whose largest coordinate move is ``lr``
    meters, with backtracking. ``method="lbfgs"`` runs up to ``iters`` L-BFGS iterations
    and keeps ``traj0`` if they end lower. ``bounds=(x0, y0, x1, y1)`` keeps every
    position inside that box.
    """
    if mp.gamma >= 1.0:
        raise DegenerateGamma("refinement needs gamma < 1")
    params = pp.arrays(series.keys)
    x = traj0.positions.copy()
    lo = hi = None
    if bounds is not None:
        lo, hi = np.array(bounds[:2], dtype=float), np.array(bounds[2:], dtype=float)
        x = np.clip(x, lo, hi)
    f, g = objective_grad(series, pp, mp, topo, x, params)
    if trace is not None:
        trace.append(f)
    if method == "lbfgs":
        return _refine_lbfgs(x, f, series, pp, mp, topo, params, iters, tol, trace, lo, hi)
    if method != "gradient":
        raise ConfigError(f"unknown refinement method {method!r}")
    scale = 1.0
    for _ in range(iters):
        gmax = float(np.abs(g).max()) if g.size else 0.0
        if not np.isfinite(gmax) or gmax < tol:
            break
        # lr is the largest coordinate move per step, in meters
        accepted = False
        for _ in range(40):
            xn = x + (scale * lr / gmax) * g
            if lo is not None:
                xn = np.clip(xn, lo, hi)
            fn, gnew = objective_grad(series, pp, mp, topo, xn, params)
            if np.isfinite(fn) and fn >= f:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        gain = fn - f
        x, f, g = xn, fn, gnew
        if trace is not None:
            trace.append(f)
        scale = min(1.0, 2.0 * scale)
        if gain <= 1e-12 * max(1.0, abs(f)):
            break
    return Trajectory(x)


def _refine_lbfgs(x0, f0, series, pp, mp, topo, params, iters, tol, trace, lo=None, hi=None):
    shape = x0.shape
    box = None if lo is None else list(zip(np.broadcast_to(lo, shape).ravel(), np.broadcast_to(hi, shape).ravel()))

    def neg(z):
        f, g = objective_grad(series, pp, mp, topo, z.reshape(shape), params)
        if not np.isfinite(f):
            return math.inf, np.zeros(z.size)
        return -f, -g.ravel()

    res = optimize.minimize(neg, x0.ravel(), jac=True, method="L-BFGS-B", bounds=box,
                            options={"maxiter": int(iters), "gtol": tol, "ftol": 1e-15})
    f = -float(res.fun)
    if not (np.isfinite(f) and f >= f0):
        return Trajectory(x0)
    if trace is not None:
        trace.append(f)
    return Trajectory(res.x.reshape(shape))


def _pp_vector(pp: PropagationParams, ids, free):
    """Flatten (alpha, beta, log sigma) per station and (omega, log eta, center) per free beam."""
    v = []
    for q in ids:
        pl = pp.path_loss[q]
        v += [pl.alpha, pl.beta, math.log(pl.sigma)]
    for q, m in free:
        bp = pp.patterns[q][m]
        v += [bp.omega, math.log(bp.eta), bp.center]
    return np.array(v, dtype=float)


def _pp_from_vector(vec, pp: PropagationParams, ids, free) -> PropagationParams:
    out = pp.copy()
    for i, q in enumerate(ids):
        a, b, ls = vec[3 * i:3 * i + 3]
        out.path_loss[q] = PathLossParams(float(a), float(b), float(math.exp(ls)))
    off = 3 * len(ids)
    for i, (q, m) in enumerate(free):
        om, le, c = vec[off + 3 * i:off + 3 * i + 3]
        out.patterns[q][m] = BeamPattern(float(om), float(math.exp(le)), float(c))
    return out


def joint_objective_grad(series, pp, mp, topo, positions, ids, free):
    """Objective and gradients w.r.t. positions and the flattened propagation vector."""
    keys = series.keys
    a = pp.arrays(keys)
    f, gx = objective_grad(series, pp, mp, topo, positions, a)
    x = np.asarray(positions, dtype=float)
    pos, h = station_geometry(topo, keys)
    diff = x[:, None, :] - pos[None, :, :]
    d2 = (diff * diff).sum(-1) + h[None, :] ** 2
    phi = np.mod(np.arctan2(diff[..., 1], diff[..., 0]), TWO_PI)
    du = angle_diff(phi, a["center"][None, :])
    e = np.exp(-a["eta"] * du * du)
    g = a["omega"] * e
    mu = a["beta"] + 0.5 * a["alpha"] * np.log10(d2) + g
    M = series.mask
    w = 1.0 / a["sigma"] ** 2
    r = np.where(M, series.values - mu, 0.0)
    wr = w * r
    d_alpha = (wr * 0.5 * np.log10(d2)).sum(0)
    d_beta = wr.sum(0)
    d_lsig = (w * r * r).sum(0) - M.sum(0)
    col = {k: j for j, k in enumerate(keys)}
    gp = []
    for q in ids:
        js = [j for j, (qq, _) in enumerate(keys) if qq == q]
        gp += [d_alpha[js].sum(), d_beta[js].sum(), d_lsig[js].sum()]
    for q, m in free:
        j = col[(q, m)]
        gp += [(wr[:, j] * e[:, j]).sum(),
               (wr[:, j] * -du[:, j] ** 2 * g[:, j]).sum() * a["eta"][j],
               (wr[:, j] * 2.0 * a["eta"][j] * du[:, j] * g[:, j]).sum()]
    return f, gx, np.array(gp)


def _tie_matrix(n_st: int, n_free: int) -> np.ndarray:
    """Map (alpha, beta, free-beam params) to the per-station vector; sigma rows are zero."""
    P = np.zeros((3 * n_st + 3 * n_free, 2 + 3 * n_free))
    P[0:3 * n_st:3, 0] = 1.0
    P[1:3 * n_st:3, 1] = 1.0
    P[3 * n_st:, 2:] = np.eye(3 * n_free)
    return P


def joint_refine(traj0: Trajectory, series: MeasurementSeries, pp: PropagationParams,
                 mp: MobilityParams, topo: Topology, iters: int = 200, tol: float = 1e-8,
                 fix_sigma: bool = True, bounds=None, tie: bool = False):
    """L-BFGS on positions and propagation parameters together, mobility held fixed.

    With ``fix_sigma`` the noise deviations stay at their input values; freeing them lets
    a station's sigma shrink towards zero while the positions chase its readings.
    With ``tie`` one (alpha, beta) pair is shared by all stations, starting from their
    means, and sigma is fixed. Beams without a pattern stay pattern-free. Returns the
    inputs unchanged unless the objective increases.
    """
    ids = sorted({q for q, _ in series.keys})
    free = [(q, m) for q, m in series.keys if pp.patterns[q][m].omega != 0 and pp.patterns[q][m].eta > 0]
    x0 = traj0.positions
    shape, n = x0.shape, x0.size
    pv = _pp_vector(pp, ids, free)
    if tie:
        return _joint_refine_tied(traj0, series, pp, mp, topo, iters, tol, bounds, ids, free, pv)
    if bounds is not None:
        x0 = np.clip(x0, bounds[:2], bounds[2:])
        box = [(bounds[0], bounds[2]), (bounds[1], bounds[3])] * len(x0)
    else:
        box = [(None, None)] * n
    for i, val in enumerate(pv):
        box.append((val, val) if fix_sigma and i < 3 * len(ids) and i % 3 == 2 else (None, None))
    z0 = np.concatenate([x0.ravel(), pv])

    def neg(z):
        try:
            cur = _pp_from_vector(z[n:], pp, ids, free)
        except (ConfigError, OverflowError, ValueError):
            return math.inf, np.zeros(z.size)
        f, gx, gp = joint_objective_grad(series, cur, mp, topo, z[:n].reshape(shape), ids, free)
        if not np.isfinite(f):
            return math.inf, np.zeros(z.size)
        return -f, -np.concatenate([gx.ravel(), gp])

    f0 = -neg(z0)[0]
    with np.errstate(over="ignore", invalid="ignore"):
        res = optimize.minimize(neg, z0, jac=True, method="L-BFGS-B", bounds=box,
                                options={"maxiter": int(iters), "gtol": tol, "ftol": 1e-15})
    f1 = -float(res.fun)
    if not (np.isfinite(f1) and f1 > f0):
        return traj0, pp
    return Trajectory(res.x[:n].reshape(shape)), _pp_from_vector(res.x[n:], pp, ids, free)


# ---------------------------------------------------------------- alternating recovery

@dataclass(frozen=True)
class RecoverConfig:
    v_max: float = 120 * KMH
    lr: float = 0.01
    refine_iters: int = 200
    refine_method: str = "lbfgs"
    max_outer: int = 15
    n_restarts: int = 1
    prune: PruneConfig = PruneConfig()
    pattern: PatternFitConfig = PatternFitConfig()
    mode: str = "blind"  # "blind", "gma" (propagation fixed) or "m1" (strongest beam, no patterns)
    warm_start: str = "aggregate"  # blind and m1 modes: "aggregate" or "none"
    joint_rounds: int = 4
    tied_rounds: int = 2  # warm start: joint rounds with (alpha, beta) shared by all stations
    joint_iters: int = 3000
    min_accel_var: float = 1e-4
    tol: float = 1e-6


@dataclass
class RecoverResult:
    trajectory: Trajectory
    pp: PropagationParams
    mp: MobilityParams
    trace: list
    restart_objectives: list = field(default_factory=list)
    warm_trace: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.trajectory, self.pp, self.mp))


def random_propagation(topo: Topology, rng: np.random.Generator, patterns: bool = True) -> PropagationParams:
    pl, pat = {}, {}
    for s in topo.stations:
        pl[s.id] = PathLossParams(rng.uniform(-40, -10), rng.uniform(0, 10), rng.uniform(0.1, 2.0))
        if patterns:
            pat[s.id] = [BeamPattern(rng.uniform(0, 20), rng.uniform(0.5, 8), rng.uniform(0, TWO_PI))
                         for _ in range(s.beam_count)]
        else:
            pat[s.id] = [BeamPattern() for _ in range(s.beam_count)]
    return PropagationParams(pl, pat)


def random_mobility(gamma, delta, v_max, rng) -> MobilityParams:
    v = rng.uniform(-v_max / 4, v_max / 4, size=2)
    return MobilityParams((v[0], v[1]), rng.uniform(1.0, 10.0), gamma, delta)


def strongest_beam_series(series: MeasurementSeries) -> MeasurementSeries:
    """Keep, per slot and station, only the strongest observed beam, relabelled as beam 0."""
    ids = series.station_ids()
    vals = np.full((series.T, len(ids)), np.nan)
    for k, q in enumerate(ids):
        cols = series.station_columns(q)
        sub = series.values[:, cols]
        has = ~np.all(np.isnan(sub), axis=1)
        vals[has, k] = np.nanmax(sub[has], axis=1)
    return MeasurementSeries(series.slot_duration, [(q, 0) for q in ids], vals)


def single_beam_topology(topo: Topology) -> Topology:
    from .topology import BaseStation
    st = tuple(BaseStation(s.id, s.position, 1, s.height_offset) for s in topo.stations)
    return Topology(st, topo.region, topo.connect_radius)


def aggregate_series(series: MeasurementSeries) -> MeasurementSeries:
    """Mean over the observed beams of each station per slot, relabelled as beam 0."""
    ids = series.station_ids()
    vals = np.full((series.T, len(ids)), np.nan)
    for k, q in enumerate(ids):
        sub = series.values[:, series.station_columns(q)]
        has = ~np.all(np.isnan(sub), axis=1)
        vals[has, k] = np.nanmean(sub[has], axis=1)
    return MeasurementSeries(series.slot_duration, [(q, 0) for q in ids], vals)


def _alternate(series, graph, topo, pp, mp, traj, cfg: RecoverConfig, fixed: bool, pcfg):
    """Alternating decode, refine and fit loop from (pp, mp) and an optional incumbent trajectory."""
    gamma, delta = mp.gamma, mp.slot
    f = -math.inf
    trace = []
    for _ in range(cfg.max_outer):
        emis = EmissionModel(series, pp, topo, graph)
        xv = viterbi2(series, pp, mp, graph, cfg.prune, emission=emis)
        del emis
        box = graph.bounds
        xr = refine_gradient(xv, series, pp, mp, topo, cfg.lr, cfg.refine_iters, method=cfg.refine_method,
                             bounds=box)
        fr = objective(series, pp, mp, topo, xr.positions)
        if traj is not None:
            f_prev = objective(series, pp, mp, topo, traj.positions)
            # polishing the incumbent guards against a worse grid decode
            xi = refine_gradient(traj, series, pp, mp, topo, cfg.lr, cfg.refine_iters,
                                 method=cfg.refine_method, bounds=box)
            fi = objective(series, pp, mp, topo, xi.positions)
            if fi > fr:
                xr, fr = xi, fi
            if fr < f_prev:
                xr, fr = traj, f_prev
        moved = traj is None or float(np.abs(xr.positions - traj.positions).max()) > cfg.tol
        traj = xr
        if not fixed:
            cand = fit_propagation(series, traj, topo, pcfg, init=pp)
            if propagation_loglik(series, traj, cand, topo) >= propagation_loglik(series, traj, pp, topo):
                pp = cand
        v, s2 = estimate_mobility(traj, gamma, delta)
        cand_m = MobilityParams((v[0], v[1]), max(s2, cfg.min_accel_var), gamma, delta)
        if transition_loglik(traj.positions, cand_m) >= transition_loglik(traj.positions, mp):
            mp = cand_m
        f_new = objective(series, pp, mp, topo, traj.positions)
        trace.append(f_new)
        if not moved or (f_new - f) <= cfg.tol * max(1.0, abs(f_new)):
            break
        f = f_new
    return RecoverResult(traj, pp, mp, trace)


def _no_patterns(pcfg: PatternFitConfig) -> PatternFitConfig:
    return PatternFitConfig(pcfg.epsilon, pcfg.max_iters, pcfg.tol, pcfg.outer_iters, False)


def _fit_mobility(traj, gamma, delta, floor) -> MobilityParams:
    v, s2 = estimate_mobility(traj, gamma, delta)
    return MobilityParams((v[0], v[1]), max(s2, floor), gamma, delta)


def _joint_rounds(series, topo, pp, mp, traj, cfg: RecoverConfig, pcfg, box, rounds=None, tie=False):
    """Joint position/path-loss ascent at fixed sigma, each round closed by guarded refits."""
    f = objective(series, pp, mp, topo, traj.positions)
    trace = [f]
    for _ in range(cfg.joint_rounds if rounds is None else rounds):
        traj, pp = joint_refine(traj, series, pp, mp, topo, cfg.joint_iters, bounds=box, tie=tie)
        cand = fit_propagation(series, traj, topo, pcfg, init=pp)
        if propagation_loglik(series, traj, cand, topo) >= propagation_loglik(series, traj, pp, topo):
            pp = cand
        cand_m = _fit_mobility(traj, mp.gamma, mp.slot, cfg.min_accel_var)
        if transition_loglik(traj.positions, cand_m) >= transition_loglik(traj.positions, mp):
            mp = cand_m
        f_new = objective(series, pp, mp, topo, traj.positions)
        trace.append(f_new)
        if f_new - f <= cfg.tol * max(1.0, abs(f_new)):
            break
        f = f_new
    return RecoverResult(traj, pp, mp, trace)


def _warm_start(series, graph, topo, gamma, delta, cfg: RecoverConfig, pcfg):
    """WCL positions, then joint ascent on beam-averaged readings with isotropic stations."""
    box = graph.bounds
    traj = Trajectory(np.clip(baseline_wcl(series, topo).positions, box[:2], box[2:]))
    agg, atopo = aggregate_series(series), single_beam_topology(topo)
    pa = fit_propagation(agg, traj, atopo, _no_patterns(pcfg))
    mp = _fit_mobility(traj, gamma, delta, cfg.min_accel_var)
    tied = _joint_rounds(agg, atopo, pa, mp, traj, cfg, _no_patterns(pcfg), box, cfg.tied_rounds, tie=True)
    res = _joint_rounds(agg, atopo, tied.pp, tied.mp, tied.trajectory, cfg, _no_patterns(pcfg), box)
    res.trace = tied.trace + res.trace[1:]
    return res


def _recover_once(series, graph, topo, gamma, delta, cfg: RecoverConfig, rng, truth_pp):
    fixed = cfg.mode == "gma"
    pcfg = _no_patterns(cfg.pattern) if cfg.mode == "m1" else cfg.pattern
    if fixed:
        if truth_pp is None:
            raise ConfigError("gma mode needs the true propagation parameters")
        pp = truth_pp
    else:
        pp = random_propagation(topo, rng, patterns=cfg.mode != "m1")
    mp = random_mobility(gamma, delta, cfg.v_max, rng)
    if fixed or cfg.warm_start == "none":
        return _alternate(series, graph, topo, pp, mp, None, cfg, fixed, pcfg)
    warm = _warm_start(series, graph, topo, gamma, delta, cfg, pcfg)
    traj, mp = warm.trajectory, warm.mp
    pp = fit_propagation(series, traj, topo, pcfg)
    full = _joint_rounds(series, topo, pp, mp, traj, cfg, pcfg, graph.bounds)
    res = _alternate(series, graph, topo, full.pp, full.mp, full.trajectory, cfg, False, pcfg)
    res.trace = full.trace + res.trace
    res.warm_trace = warm.trace
    return res


def recover(series: MeasurementSeries, graph: GridGraph, gamma: float, delta: float,
            cfg: RecoverConfig = RecoverConfig(), *, topo: Topology, rng: np.random.Generator,
            truth_pp: PropagationParams | None = None) -> RecoverResult:
    """Alternate grid decoding, refinement and parameter fits from random starts.

    The joint objective is non-decreasing along ``result.trace``. With ``n_restarts > 1``
    the run with the highest final objective is returned. In blind mode with
    ``warm_start="aggregate"`` (also used by ``m1``) the run starts from the WCL positions,
    ascends jointly in positions and path loss on beam-averaged readings (first with
    path loss shared by all stations), then on the full model, before the grid
    alternation; ``result.warm_trace`` holds the first stage's objective. Random initial parameters are used with ``warm_start="none"``.
    """
    if gamma >= 1.0:
        raise DegenerateGamma("recovery needs gamma < 1")
    if cfg.mode not in ("blind", "gma", "m1"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    if cfg.warm_start not in ("aggregate", "none"):
        raise ConfigError(f"unknown warm start {cfg.warm_start!r}")
    if cfg.mode == "m1":
        series = strongest_beam_series(series)
        topo = single_beam_topology(topo)
    best = None
    finals = []
    for _ in range(max(1, cfg.n_restarts)):
        res = _recover_once(series, graph, topo, gamma, delta, cfg, rng, truth_pp)
        finals.append(res.trace[-1])
        if best is None or res.trace[-1] > best.trace[-1]:
            best = res
    best.restart_objectives = finals
    return best


# ---------------------------------------------------------------- baselines and metric

def localization_error(truth: Trajectory, est: Trajectory) -> float:
    a = truth.positions if isinstance(truth, Trajectory) else np.asarray(truth, dtype=float)
    b = est.positions if isinstance(est, Trajectory) else np.asarray(est, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    return float(np.linalg.norm(a - b, axis=1).mean())


def baseline_mar(series: MeasurementSeries, topo: Topology) -> Trajectory:
    """Position of the station carrying the strongest reading in each slot."""
    pos, _ = station_geometry(topo, series.keys)
    qs = np.array([q for q, _ in series.keys])
    out = np.empty((series.T, 2))
    last = topo.stations[0].position if len(topo) else (0.0, 0.0)
    for t in range(series.T):
        row = series.values[t]
        ok = ~np.isnan(row)
        if not ok.any():
            out[t] = last
            continue
        top = row[ok].max()
        # ties go to the lowest station id
        j = np.nonzero(ok & (row == top))[0]
        j = j[np.argmin(qs[j])]
        out[t] = last = pos[j]
    return Trajectory(out)


def baseline_wcl(series: MeasurementSeries, topo: Topology) -> Trajectory:
    """Weighted centroid with weights 10^(y/20) normalised over the slot's readings."""
    pos, _ = station_geometry(topo, series.keys)
    out = np.empty((series.T, 2))
    last = topo.stations[0].position if len(topo) else (0.0, 0.0)
    for t in range(series.T):
        row = series.values[t]
        ok = ~np.isnan(row)
        if not ok.any():
            out[t] = last
            continue
        y = row[ok]
        w = 10.0 ** ((y - y.max()) / 20.0)
        w /= w.sum()
        out[t] = last = w @ pos[ok]
    return Trajectory(out)


def _joint_refine_tied(traj0, series, pp, mp, topo, iters, tol, bounds, ids, free, pv):
    x0 = traj0.positions
    shape, n = x0.shape, x0.size
    P = _tie_matrix(len(ids), len(free))
    base = np.zeros_like(pv)
    base[2:3 * len(ids):3] = pv[2:3 * len(ids):3]
    u0 = np.concatenate([[pv[0:3 * len(ids):3].mean(), pv[1:3 * len(ids):3].mean()], pv[3 * len(ids):]])
    if bounds is not None:
        x0 = np.clip(x0, bounds[:2], bounds[2:])
        box = [(bounds[0], bounds[2]), (bounds[1], bounds[3])] * len(x0)
    else:
        box = [(None, None)] * n
    box += [(None, None)] * u0.size
    z0 = np.concatenate([x0.ravel(), u0])

    def neg(z):
        try:
            cur = _pp_from_vector(base + P @ z[n:], pp, ids, free)
        except (ConfigError, OverflowError, ValueError):
            return math.inf, np.zeros(z.size)
        f, gx, gp = joint_objective_grad(series, cur, mp, topo, z[:n].reshape(shape), ids, free)
        if not np.isfinite(f):
            return math.inf, np.zeros(z.size)
        return -f, -np.concatenate([gx.ravel(), P.T @ gp])

    f_in = objective(series, pp, mp, topo, traj0.positions)
    with np.errstate(over="ignore", invalid="ignore"):
        res = optimize.minimize(neg, z0, jac=True, method="L-BFGS-B", bounds=box,
                                options={"maxiter": int(iters), "gtol": tol, "ftol": 1e-15})
    f1 = -float(res.fun)
    if not (np.isfinite(f1) and f1 > f_in):
        return traj0, pp
    return Trajectory(res.x[:n].reshape(shape)), _pp_from_vector(base + P @ res.x[n:], pp, ids, free)
