"""Mobility closed forms, path-loss regression and the iterative beam-pattern fit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import (HALF_LOG_2PI, BeamPattern, MeasurementSeries, PathLossParams,
                      PropagationParams, angle_diff, mean_matrix)
from .errors import (DegenerateGamma, InsufficientData, InvalidCurvature, SingularDesign)
from .mobility import Trajectory, transition_residuals
from .topology import TWO_PI, Topology, bearings, distances


@dataclass(frozen=True)
class PatternFitConfig:
    epsilon: float = 0.01
    max_iters: int = 100
    tol: float = 1e-6
    outer_iters: int = 50
    fit_patterns: bool = True


@dataclass(frozen=True)
class QuadCoeffs:
    b1: float
    b2: float
    b3: float

    def to_pattern(self, ref: float = 0.0) -> BeamPattern:
        """Map the linearised coefficients back to (omega, eta, c).

        ``ref`` is the chart origin: the quadratic was fit in u = wrap(phi - ref).
        """
        if not self.b1 < 0:
            raise InvalidCurvature(f"b1 = {self.b1} >= 0 gives no decaying pattern")
        eta = -self.b1
        uc = -self.b2 / (2.0 * self.b1)
        log_omega = self.b3 - self.b2 ** 2 / (4.0 * self.b1)
        if not log_omega < 700.0:
            raise InvalidCurvature("peak gain overflows")
        omega = math.exp(log_omega)
        return BeamPattern(omega, eta, (ref + uc) % TWO_PI)


# ---------------------------------------------------------------- mobility

def estimate_mobility(traj, gamma: float, delta: float):
    """Closed-form maximiser of the summed transition log-density.

    Returns ``(v_bar, sigma_v2)``.
    """
    p = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if len(p) < 3:
        raise InsufficientData("mobility estimate needs T >= 3")
    if gamma >= 1.0:
        raise DegenerateGamma("closed form undefined for gamma = 1")
    r0 = transition_residuals(p, gamma, delta)
    n = len(r0)
    v_bar = r0.sum(0) / (n * (1.0 - gamma) * delta)
    r = r0 - (1.0 - gamma) * delta * v_bar
    sigma_v2 = (r * r).sum() / (2.0 * n * (1.0 - gamma ** 2) * delta ** 2)
    return v_bar, float(sigma_v2)


# ---------------------------------------------------------------- path loss

def _station_data(series: MeasurementSeries, traj, topo: Topology, q: int):
    """Log-distances, bearings, readings and mask for station ``q``."""
    p = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if len(p) != series.T:
        raise InsufficientData("trajectory and series lengths differ")
    bs = topo.station(q)
    cols = series.station_columns(q)
    ms = [series.keys[j][1] for j in cols]
    d = distances(p, [bs.position], [bs.height_offset])[:, 0]
    if np.any(d <= 0):
        d = np.maximum(d, 1e-9)
    phi = bearings(p, [bs.position])[:, 0]
    Y = series.values[:, cols]
    return np.log10(d), phi, Y, ~np.isnan(Y), ms


def _lstsq2(ld, y):
    D = np.column_stack([ld, np.ones_like(ld)])
    if len(ld) < 2 or np.ptp(ld) <= 1e-12 * max(1.0, np.abs(ld).max()):
        raise SingularDesign("need at least two distinct log-distances")
    sol, *_ = np.linalg.lstsq(D, y, rcond=None)
    return float(sol[0]), float(sol[1])


def fit_path_loss_aggregate(series: MeasurementSeries, traj, topo: Topology, q: int):
    """(alpha, beta) regressing the per-slot mean over observed beams on log10 d."""
    ld, _, Y, M, _ = _station_data(series, traj, topo, q)
    rows = M.any(1)
    if rows.sum() < 2:
        raise SingularDesign(f"station {q} observed in fewer than two slots")
    ybar = np.where(M, Y, 0.0)[rows].sum(1) / M[rows].sum(1)
    return _lstsq2(ld[rows], ybar)


def pattern_gains(patterns, phi, ms) -> np.ndarray:
    """Gain matrix (T, len(ms)) for the beams ``ms`` at bearings ``phi``."""
    out = np.empty((len(phi), len(ms)))
    for k, m in enumerate(ms):
        out[:, k] = patterns[m].gain(phi)
    return out


def fit_path_loss_residual(series: MeasurementSeries, traj, topo: Topology, q: int, patterns):
    """(alpha, beta, sigma) after removing the beam-pattern gains from every reading."""
    ld, phi, Y, M, ms = _station_data(series, traj, topo, q)
    G = pattern_gains(patterns, phi, ms)
    Yp = (Y - G)[M]
    LD = np.broadcast_to(ld[:, None], Y.shape)[M]
    alpha, beta = _lstsq2(LD, Yp)
    res = Yp - beta - alpha * LD
    sigma = math.sqrt(float(res @ res) / len(res))
    return alpha, beta, sigma


# ---------------------------------------------------------------- beam pattern

def pattern_weights(y_dd, model) -> np.ndarray:
    """Weights that make the log-domain WLS gradient equal the linear-domain one.

    lambda = B * (y - B) / (ln y - ln B) = B^2 * expm1(u) / u with u = ln y - ln B,
    and the continuous limit B^2 where u = 0.
    """
    y_dd = np.asarray(y_dd, dtype=float)
    B = np.asarray(model, dtype=float)
    u = np.log(y_dd) - np.log(B)
    return np.exp(log_pattern_weights(u, np.log(B)))


def log_pattern_weights(u, log_b) -> np.ndarray:
    """log of B^2 * expm1(u) / u, stable for large |u|."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-8
    us = np.where(small, 1.0, u)
    big = us > 30.0
    # expm1(u)/u > 0 for every real u
    lr = np.where(big, us - np.log(np.where(big, us, 1.0)),
                  np.log(np.where(big, 1.0, np.expm1(np.minimum(us, 30.0)) / us)))
    lr = np.where(small, 0.5 * u, lr)
    return 2.0 * np.asarray(log_b, dtype=float) + lr


def wls_quadratic(u, log_y, lam) -> QuadCoeffs:
    """Weighted least squares of log_y on [u^2, u, 1]."""
    Phi = np.column_stack([u * u, u, np.ones_like(u)])
    sw = np.sqrt(lam)
    A = Phi * sw[:, None]
    if not np.all(np.isfinite(A)):
        raise SingularDesign("non-finite weights")
    try:
        if np.linalg.matrix_rank(A) < 3:
            raise SingularDesign("quadratic design is rank deficient")
        b, *_ = np.linalg.lstsq(A, log_y * sw, rcond=None)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(str(exc)) from exc
    return QuadCoeffs(float(b[0]), float(b[1]), float(b[2]))


def fit_beam_pattern(y_dd, phi, cfg: PatternFitConfig = PatternFitConfig()):
    """Iteratively reweighted log-domain fit of omega * exp(-eta * wrap(phi - c)^2).

    Only samples with ``y_dd > cfg.epsilon`` enter the fit. Returns ``(omega, eta, c)``.
    """
    y_dd = np.asarray(y_dd, dtype=float)
    phi = np.asarray(phi, dtype=float)
    keep = np.isfinite(y_dd) & (y_dd > cfg.epsilon)
    y, ph = y_dd[keep], phi[keep]
    if len(y) < 3 or len(np.unique(np.round(ph, 12))) < 3:
        raise InsufficientData("pattern fit needs >= 3 samples at >= 3 distinct bearings")
    ref = float(ph[np.argmax(y)])
    u = angle_diff(ph, ref)
    ly = np.log(y)
    lam = np.ones_like(y)
    theta = None
    for _ in range(cfg.max_iters):
        b = wls_quadratic(u, ly, lam)
        if not b.b1 < 0:
            if theta is None:
                raise InvalidCurvature("log-domain fit is not concave")
            break
        bp = b.to_pattern(ref)
        new = np.array([bp.omega, bp.eta, angle_diff(bp.center, ref)])
        done = theta is not None and np.all(np.abs(new - theta) <= cfg.tol * (1.0 + np.abs(theta)))
        theta = new
        if done:
            break
        log_b = math.log(bp.omega) - bp.eta * (u - theta[2]) ** 2
        # the WLS solution is invariant to a common weight scale
        ll = log_pattern_weights(ly - log_b, log_b)
        lam = np.exp(ll - ll.max())
    return float(theta[0]), float(theta[1]), float((ref + theta[2]) % TWO_PI)


# ---------------------------------------------------------------- alternating propagation fit

def propagation_loglik(series: MeasurementSeries, traj, pp: PropagationParams, topo: Topology) -> float:
    """Summed Gaussian log-likelihood of every observed reading (the propagation objective)."""
    p = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    a = pp.arrays(series.keys)
    mu = mean_matrix(pp, topo, series.keys, p, a)
    M = series.mask
    r = np.where(M, series.values - mu, 0.0) / a["sigma"]
    return float(-0.5 * (r * r).sum() - (M * (np.log(a["sigma"]) + HALF_LOG_2PI)).sum())


def _beam_sse(y, ld, phi, alpha, beta, bp: BeamPattern) -> float:
    r = y - beta - alpha * ld - bp.gain(phi)
    with np.errstate(over="ignore"):  # a diverged candidate scores inf and is rejected
        return float(r @ r)


def _station_objective(n: int, sigma: float) -> float:
    # Gaussian log-likelihood at the sigma maximiser: SSE / (2 sigma^2) = n / 2
    return -n * (math.log(sigma) + 0.5 + HALF_LOG_2PI)


def fit_station(series, traj, topo, q, cfg: PatternFitConfig = PatternFitConfig(), flags=None,
                trace=None):
    """Alternating path-loss and pattern fit for one station: (PathLossParams, list of BeamPattern).

    ``trace`` (a list) receives the station's log-likelihood after every outer iteration.
    """
    ld, phi, Y, M, ms = _station_data(series, traj, topo, q)
    n_obs = int(M.sum())
    n_beams = topo.station(q).beam_count
    patterns = [BeamPattern() for _ in range(n_beams)]
    alpha, beta = fit_path_loss_aggregate(series, traj, topo, q)
    alpha, beta, sigma = fit_path_loss_residual(series, traj, topo, q, patterns)
    if not cfg.fit_patterns:
        return PathLossParams(alpha, beta, max(sigma, 1e-9)), patterns
    # first pattern pass uses the aggregate intercept, as the algorithm prescribes
    alpha, beta = fit_path_loss_aggregate(series, traj, topo, q)
    for _ in range(cfg.outer_iters):
        old = np.array([alpha, beta] + [v for b in patterns for v in (b.omega, b.eta, b.center)])
        for k, m in enumerate(ms):
            sel = M[:, k]
            if sel.sum() < 3:
                continue
            y, l_, ph = Y[sel, k], ld[sel], phi[sel]
            try:
                w, e, c = fit_beam_pattern(y - beta - alpha * l_, ph, cfg)
                cand = BeamPattern(w, e, c)
            except (InsufficientData, InvalidCurvature, SingularDesign) as exc:
                if flags is not None:
                    flags.append((q, m, type(exc).__name__))
                cand = BeamPattern()
            if _beam_sse(y, l_, ph, alpha, beta, cand) <= _beam_sse(y, l_, ph, alpha, beta, patterns[m]):
                patterns[m] = cand
        alpha, beta, sigma = fit_path_loss_residual(series, traj, topo, q, patterns)
        if trace is not None and sigma > 0:
            trace.append(_station_objective(n_obs, sigma))
        new = np.array([alpha, beta] + [v for b in patterns for v in (b.omega, b.eta, b.center)])
        if np.all(np.abs(new - old) <= cfg.tol * (1.0 + np.abs(old))):
            break
    return PathLossParams(alpha, beta, max(sigma, 1e-9)), patterns


def fit_propagation(series: MeasurementSeries, traj, topo: Topology,
                    cfg: PatternFitConfig = PatternFitConfig(), *, init: PropagationParams | None = None,
                    flags: list | None = None, traces: dict | None = None) -> PropagationParams:
    """Fit every station independently; stations without enough data keep ``init`` values."""
    pl, pat = {}, {}
    for s in topo.stations:
        tr = traces.setdefault(s.id, []) if traces is not None else None
        try:
            pl[s.id], pat[s.id] = fit_station(series, traj, topo, s.id, cfg, flags, tr)
        except (SingularDesign, InsufficientData) as exc:
            if flags is not None:
                flags.append((s.id, None, type(exc).__name__))
            if init is not None:
                pl[s.id], pat[s.id] = init.path_loss[s.id], list(init.patterns[s.id])
            else:
                pl[s.id] = PathLossParams(-20.0, 0.0, 1.0)
                pat[s.id] = [BeamPattern() for _ in range(s.beam_count)]
    return PropagationParams(pl, pat)
