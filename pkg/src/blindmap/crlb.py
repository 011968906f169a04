"""Fisher information for the constant-velocity model, closed-form bounds and the
MLE Monte-Carlo harness used to check the scaling laws.

Trajectory convention: x_t = x + t * delta * v for t = 1..T, with v in m/s. The
information uses the derivative of the log10 path-loss model, so every bound works
with alpha_eff = alpha / ln 10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .channel import LN10, PropagationParams
from .errors import ConfigError, InvalidRadii, SingularGeometry, TrajectoryThroughBS
from .topology import BaseStation, Topology


@dataclass
class FimResult:
    f_psi: np.ndarray
    f_x: np.ndarray
    f_v: np.ndarray
    crlb_x: float
    crlb_v: float


@dataclass(frozen=True)
class BoundConfig:
    """Extremal propagation constants.

    The alpha^2 fields are squared slopes per natural-log unit of distance, i.e. the
    curvature that enters the information. Use ``from_db`` to convert from dB/decade.
    """

    r0: float = 1.0
    alpha2_min: float = 400.0
    alpha2_max: float = 400.0
    sigma2_min: float = 0.01
    sigma2_max: float = 0.01

    @classmethod
    def from_db(cls, alphas, sigmas, r0: float = 1.0) -> "BoundConfig":
        a2 = (np.asarray(alphas, dtype=float) / LN10) ** 2
        s2 = np.asarray(sigmas, dtype=float) ** 2
        return cls(r0, float(a2.min()), float(a2.max()), float(s2.min()), float(s2.max()))

    @property
    def c0(self) -> float:
        return self.alpha2_max / self.sigma2_min

    @property
    def c0_tilde(self) -> float:
        return self.alpha2_min / self.sigma2_max


def _station_arrays(topo: Topology, params):
    """Positions, heights, alpha and sigma per station."""
    pos = topo.positions
    h = topo.heights
    if isinstance(params, PropagationParams):
        al = np.array([params.path_loss[q].alpha for q in topo.ids])
        sg = np.array([params.path_loss[q].sigma for q in topo.ids])
    else:
        al = np.array([params[q][0] for q in topo.ids], dtype=float)
        sg = np.array([params[q][1] for q in topo.ids], dtype=float)
    return pos, h, al, sg


def _geometry(topo: Topology, x, v, T: int, delta: float):
    """w_{t,q} = x_t - o_q (planar) and d_{t,q}; shapes (T, Q, 2) and (T, Q)."""
    t = np.arange(1, T + 1, dtype=float)
    xt = np.asarray(x, dtype=float)[None, :] + (t * delta)[:, None] * np.asarray(v, dtype=float)[None, :]
    w = xt[:, None, :] - topo.positions[None, :, :]
    d2 = (w * w).sum(-1) + topo.heights[None, :] ** 2
    return t, w, d2


def _inv_trace(m: np.ndarray) -> float:
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    scale = max(abs(m[0, 0]), abs(m[1, 1]), 1e-300)
    if not det > 1e-13 * scale * scale:
        return math.inf
    return float((m[0, 0] + m[1, 1]) / det)


def fim_psi(topo: Topology, x, v, params, T: int, delta: float = 1.0) -> FimResult:
    """Information about psi = (x, v) from T slots of every station within range.

    Sums (alpha_q/ln10)^2 / (sigma_q^2 d^4) * [[1, s], [s, s^2]] kron (w w^T) with
    s = t * delta, so that the v block is in (m/s)^-2 units.
    """
    if len(topo) == 0:
        raise SingularGeometry("no stations")
    pos, h, al, sg = _station_arrays(topo, params)
    t, w, d2 = _geometry(topo, x, v, T, delta)
    if np.any(d2 <= 0):
        raise TrajectoryThroughBS("trajectory passes through a station")
    vis = d2 <= topo.connect_radius ** 2 if math.isfinite(topo.connect_radius) else np.ones_like(d2, bool)
    coef = np.where(vis, (al / LN10) ** 2 / sg ** 2 / (d2 * d2), 0.0)
    s = t * delta
    ww = np.einsum("tq,tqi,tqj->tij", coef, w, w)
    f = np.zeros((4, 4))
    f[:2, :2] = ww.sum(0)
    f[:2, 2:] = (s[:, None, None] * ww).sum(0)
    f[2:, :2] = f[:2, 2:].T
    f[2:, 2:] = (s[:, None, None] ** 2 * ww).sum(0)
    fx, fv = f[:2, :2].copy(), f[2:, 2:].copy()
    return FimResult(f, fx, fv, _inv_trace(fx), _inv_trace(fv))


def series_s(T: int, q: int, n: int, x, v, topo: Topology, delta: float = 1.0) -> float:
    """sum_{t=1..T} t^n / d_{t,q}^4."""
    if n not in range(5):
        raise ConfigError("n must be in 0..4")
    sub = Topology((topo.station(q),), topo.region)
    t, _, d2 = _geometry(sub, x, v, T, delta)
    return float((t ** n / (d2[:, 0] ** 2)).sum())


def _a_matrix(topo, x, v, T, delta, shift):
    """sum_t sum_q t^shift * w w^T / d^4 (the A_{T,x} / A_{T,v} matrices)."""
    t, w, d2 = _geometry(topo, x, v, T, delta)
    if np.any(d2 <= 0):
        raise TrajectoryThroughBS("trajectory passes through a station")
    coef = (t[:, None] ** shift) / (d2 * d2)
    return np.einsum("tq,tqi,tqj->ij", coef, w, w)


def lambda_min_2x2(m) -> float:
    a, b, c = m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1]
    return float(0.5 * (a + c) - math.sqrt(0.25 * (a - c) ** 2 + b * b))


def bound_limited_x(T: int, topo: Topology, x, v, cfg: BoundConfig, delta: float = 1.0) -> float:
    """tr{(C0 A_{T,x})^-1} with C0 = alpha_max^2 / sigma_min^2."""
    A = _a_matrix(topo, x, v, T, delta, 0)
    val = _inv_trace(cfg.c0 * A)
    if not math.isfinite(val):
        raise SingularGeometry("station directions and v are collinear")
    return val


@dataclass
class VelocityBound:
    delta: float
    c_v: float
    s_inf: dict = field(default_factory=dict)
    s_inf_bound: dict = field(default_factory=dict)


def s_infinity(q: int, x, v, topo: Topology, delta: float = 1.0, n_terms: int = 200000) -> float:
    """sum_{t>=1} t^2 / d_{t,q}^4: explicit sum plus the 1/(t^2 |v|^4) tail."""
    head = series_s(n_terms, q, 2, x, v, topo, delta)
    sp = float(np.linalg.norm(v)) * delta
    return head + float(special.polygamma(1, n_terms + 1)) / sp ** 4


def bound_limited_v(T: int, topo: Topology, x, v, cfg: BoundConfig, delta: float = 1.0) -> VelocityBound:
    """(C0 lambda_min(A_{T,v}))^-1 together with its limit C_v.

    Here t runs in slots, so the bound is in (m/slot)^2; divide by delta^2 for (m/s)^2.
    """
    A = _a_matrix(topo, x, v, T, delta, 2)
    lam = lambda_min_2x2(A)
    vv = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(vv))
    if nv == 0:
        raise SingularGeometry("zero velocity")
    P = np.eye(2) - np.outer(vv, vv) / nv ** 2
    l = np.asarray(x, dtype=float)[None, :] - topo.positions
    proj = ((l @ P) ** 2).sum(1)
    if not lam > 0 or not np.any(proj > 1e-12):
        raise SingularGeometry("every station is collinear with v")
    s_inf, s_bnd = {}, {}
    total = 0.0
    sp = nv * delta
    for k, q in enumerate(topo.ids):
        s_inf[q] = s_infinity(q, x, vv, topo, delta)
        total += s_inf[q] * proj[k]
        t, _, d2 = _geometry(Topology((topo.station(q),), topo.region), x, vv, 20000, delta)
        rho = min(float((np.sqrt(d2[:, 0]) / t).min()), sp)
        s_bnd[q] = math.pi ** 2 / (6.0 * rho ** 4)
    return VelocityBound(1.0 / (cfg.c0 * lam), 1.0 / (cfg.c0 * total), s_inf, s_bnd)


def _check_radii(R, r0):
    if not (r0 > 0 and R >= r0):
        raise InvalidRadii(f"need R >= r0 > 0, got R={R}, r0={r0}")


def bound_unlimited_x(T: int, kappa: float, R: float, r0: float, cfg: BoundConfig) -> float:
    """2 / (C0~ lambda_min(A~_{T,x})); the PPP expectation makes A~ = T kappa pi ln(R/r0) I."""
    _check_radii(R, r0)
    lam = T * kappa * expected_projection_closed(R, r0)
    if not lam > 0:
        raise InvalidRadii("R = r0 carries no information")
    return 2.0 / (cfg.c0_tilde * lam)


def bound_unlimited_v(T: int, kappa: float, R: float, r0: float, cfg: BoundConfig) -> float:
    """As bound_unlimited_x with sum_t t^2 = T(T+1)(2T+1)/6 (t in slots)."""
    _check_radii(R, r0)
    lam = T * (T + 1) * (2 * T + 1) / 6.0 * kappa * expected_projection_closed(R, r0)
    if not lam > 0:
        raise InvalidRadii("R = r0 carries no information")
    return 2.0 / (cfg.c0_tilde * lam)


def expected_projection_closed(R: float, r0: float) -> float:
    return math.pi * math.log(R / r0)


def expected_projection_integral(R: float, r0: float) -> float:
    """Quadrature of x^2 / (x^2 + y^2)^2 over the annulus r0 <= |(x, y)| <= R."""
    _check_radii(R, r0)
    if R == r0:
        return 0.0
    f = lambda y, x: x * x / (x * x + y * y) ** 2
    opts = dict(epsabs=0.0, epsrel=1e-10)
    # first quadrant, times four; split where the inner circle stops bounding y
    inner, _ = integrate.dblquad(f, 0.0, r0, lambda x: math.sqrt(r0 * r0 - x * x),
                                 lambda x: math.sqrt(R * R - x * x), **opts)
    outer, _ = integrate.dblquad(f, r0, R, 0.0, lambda x: math.sqrt(max(R * R - x * x, 0.0)), **opts)
    return 4.0 * (inner + outer)


# ---------------------------------------------------------------- MLE experiment

@dataclass(frozen=True)
class MLEScenario:
    """Constant-velocity single-beam set-up for the MSE scaling experiments.

    ``kind="unlimited"``: Poisson stations of density ``kappa`` heard within ``R``.
    ``kind="limited"``: ``Q`` stations uniform in a square of half-width ``half_width``
    around the start, always heard.
    """

    kind: str = "unlimited"
    kappa: float = 1.02e-3
    R: float = 50.0
    Q: int = 8
    half_width: float = 100.0
    alpha: float = -20.0
    beta: float = 5.0
    sigma: float = 0.1
    velocity: tuple = (10.0, 0.0)
    x0: tuple = (0.0, 0.0)
    delta: float = 0.5
    clearance: float = 2.0
    height: float = 0.0
    start_scales: tuple = (0.1, 1.0, 10.0)
    common_random_numbers: bool = False

    def __post_init__(self):
        if self.kind not in ("unlimited", "limited"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")


def _path(sc: MLEScenario, T: int):
    t = np.arange(1, T + 1, dtype=float) * sc.delta
    return np.asarray(sc.x0, float)[None, :] + t[:, None] * np.asarray(sc.velocity, float)[None, :]


def _dist_to_segment(pts, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    u = np.clip(((pts - a) @ ab) / L2, 0.0, 1.0) if L2 > 0 else np.zeros(len(pts))
    return np.linalg.norm(pts - (a + u[:, None] * ab), axis=1)


def sample_layout(sc: MLEScenario, T: int, rng: np.random.Generator) -> np.ndarray:
    """Station positions for one trial, rejecting any within ``clearance`` of the path."""
    xs = _path(sc, T)
    a, b = np.asarray(sc.x0, float), xs[-1]
    if sc.kind == "limited":
        out = []
        while len(out) < sc.Q:
            p = rng.uniform(-sc.half_width, sc.half_width, size=2) + a
            if _dist_to_segment(p[None, :], a, b)[0] > sc.clearance:
                out.append(p)
        return np.array(out)
    lo = np.minimum(a, b) - sc.R
    hi = np.maximum(a, b) + sc.R
    n = rng.poisson(sc.kappa * float(np.prod(hi - lo)))
    pts = rng.uniform(lo, hi, size=(n, 2))
    return pts[_dist_to_segment(pts, a, b) > sc.clearance]


def _pair_model(theta, t, o, heights):
    """Model mean on (slot time, station position) pairs; t and o have matching rows."""
    x, v, alpha, beta = theta[:2], theta[2:4], theta[4], theta[5]
    w = x[None, :] + t[:, None] * v[None, :] - o
    d2 = (w * w).sum(-1) + heights ** 2
    return beta + 0.5 * alpha * np.log10(d2), w, d2


def mle_fit(y, t, o, theta0, heights=0.0):
    """Least-squares (x, v, alpha, beta) for y_k = beta + alpha log10 |x + t_k v - o_k|."""

    def fun(th):
        return _pair_model(th, t, o, heights)[0] - y

    def jac(th):
        _, w, d2 = _pair_model(th, t, o, heights)
        g = (th[4] / LN10) * w / d2[:, None]
        J = np.empty((len(y), 6))
        J[:, 0:2] = g
        J[:, 2:4] = g * t[:, None]
        J[:, 4] = 0.5 * np.log10(d2)
        J[:, 5] = 1.0
        return J

    return optimize.least_squares(fun, theta0, jac=jac, method="lm", xtol=1e-12, ftol=1e-12,
                                  gtol=1e-12, max_nfev=2000)


def _visible_pairs(sc: MLEScenario, T: int, o: np.ndarray):
    xs = _path(sc, T)
    if sc.kind == "limited":
        ti, qi = np.divmod(np.arange(T * len(o)), len(o))
        return ti, qi
    from scipy.spatial import cKDTree
    lists = cKDTree(o).query_ball_point(xs, sc.R)
    ti = np.repeat(np.arange(T), [len(l) for l in lists])
    qi = np.fromiter((q for l in lists for q in sorted(l)), dtype=int, count=len(ti))
    return ti, qi


def mle_trial(sc: MLEScenario, T: int, rng: np.random.Generator, layout=None, noise=None):
    """One trial; returns (sq error x, sq error v in (m/s)^2, converged)."""
    o = sample_layout(sc, T, rng) if layout is None else layout
    x = np.asarray(sc.x0, float)
    v = np.asarray(sc.velocity, float)
    truth = np.array([x[0], x[1], v[0], v[1], sc.alpha, sc.beta])
    if len(o) == 0:
        return math.nan, math.nan, False
    ti, qi = _visible_pairs(sc, T, o)
    if len(ti) < 8:
        return math.nan, math.nan, False
    tt = (ti + 1) * sc.delta
    oo = o[qi]
    mu = _pair_model(truth, tt, oo, sc.height)[0]
    if noise is None:
        noise = rng.standard_normal((T, len(o)))
    y = mu + sc.sigma * noise[ti, qi]
    best = None
    starts = [truth.copy()]
    for s in sc.start_scales:
        # position scale in meters, velocity in m/s, alpha and beta in dB
        pert = rng.standard_normal(6) * np.array([s, s, 0.1 * s, 0.1 * s, s, s])
        starts.append(truth + pert)
    for th0 in starts:
        try:
            r = mle_fit(y, tt, oo, th0, sc.height)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.all(np.isfinite(r.x)) and (best is None or r.cost < best.cost):
            best = r
    if best is None:
        return math.nan, math.nan, False
    ex = float(((best.x[:2] - x) ** 2).sum())
    ev = float(((best.x[2:4] - v) ** 2).sum())
    return ex, ev, bool(best.status > 0)


@dataclass
class MLECurves:
    T: list
    mse_x: list
    mse_v: list
    n_failed: list

    def slope(self, which: str = "x") -> float:
        y = np.log(np.asarray(self.mse_x if which == "x" else self.mse_v))
        return float(np.polyfit(np.log(np.asarray(self.T, float)), y, 1)[0])


def mle_experiment(scenario: MLEScenario, T_list, trials: int, rng: np.random.Generator,
                   workers: int = 1) -> MLECurves:
    """Average squared errors of the MLE over ``trials`` per horizon.

    With ``common_random_numbers`` every horizon reuses the same layout and noise draws,
    sampled once for the longest horizon.
    """
    T_list = [int(T) for T in T_list]
    seeds = np.random.SeedSequence(int(rng.integers(0, 2 ** 63 - 1))).spawn(trials)
    jobs = [(scenario, T_list, s) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_trial_row, jobs))
    else:
        rows = [_trial_row(j) for j in jobs]
    mse_x, mse_v, fails = [], [], []
    for k in range(len(T_list)):
        ex_ = np.array([r[k][0] for r in rows])
        ev_ = np.array([r[k][1] for r in rows])
        ok = np.array([r[k][2] for r in rows]) & np.isfinite(ex_)
        mse_x.append(float(ex_[ok].mean()) if ok.any() else math.nan)
        mse_v.append(float(ev_[ok].mean()) if ok.any() else math.nan)
        fails.append(int((~ok).sum()))
    return MLECurves(T_list, mse_x, mse_v, fails)


def _trial_row(job):
    sc, T_list, seed = job
    rng = np.random.default_rng(seed)
    if sc.common_random_numbers:
        Tm = max(T_list)
        layout = sample_layout(sc, Tm, rng)
        noise = rng.standard_normal((Tm, len(layout)))
        return [mle_trial(sc, T, rng, layout, noise) for T in T_list]
    return [mle_trial(sc, T, rng) for T in T_list]
