"""The twelve acceptance checks, each returning a pass/fail result with its measured values.

Checks that compare against an oracle compute the oracle here from first principles
(complex-step Jacobians, exhaustive enumeration, generic optimisers, quadrature) rather
than through the code under test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .channel import BeamPattern, MeasurementSeries, PathLossParams, PropagationParams, log_likelihood_obs
from .crlb import expected_projection_closed, expected_projection_integral, fim_psi
from .estimators import (estimate_mobility, fit_path_loss_aggregate, fit_path_loss_residual, pattern_weights)
from .experiments import (PredictionScenario, RecoveryScenario, plateau_experiment, prediction_experiment,
                          recovery_experiment, scaling_experiment)
from .mobility import MobilityParams, log_transition, simulate
from .synth import PPConfig, TrajConfig, aggregate_gain, gen_mimo, gen_scenario1
from .topology import BaseStation, Topology
from .trajectory import NO_PRUNE, RecoverConfig, ViterbiStats, build_grid, recover, viterbi2

LN10 = math.log(10.0)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"AC{self.number:<2d} {'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# ---------------------------------------------------------------- AC1-AC3

def ac1_ac2(workers: int = 1, seed: int = 0, trials: int = 50):
    r = scaling_experiment(trials, seed=seed, workers=workers)
    d = f"T={r.T} mse_x={[f'{v:.3g}' for v in r.mse_x]} failed={r.n_failed}"
    a1 = CriterionResult(1, "MSE(x) slope in [-1.3, -0.7]", -1.3 <= r.slope_x <= -0.7,
                         f"slope {r.slope_x:.3f}; {d}")
    a2 = CriterionResult(2, "MSE(v) slope in [-3.5, -2.5]", -3.5 <= r.slope_v <= -2.5,
                         f"slope {r.slope_v:.3f}; mse_v={[f'{v:.3g}' for v in r.mse_v]}")
    return a1, a2


def ac3(workers: int = 1, seed: int = 0, trials: int = 50):
    r = plateau_experiment(trials, seed, workers)
    dec = all(b2 < b1 for b1, b2 in zip(r.bound_x, r.bound_x[1:]))
    ok = dec and r.bound_ratio > 0.99 and r.mse_ratio > 0.5
    return CriterionResult(3, "limited-region plateau", ok,
                           f"bound decreasing={dec} bound(2e4)/bound(1e4)={r.bound_ratio:.5f} "
                           f"mse(8000)/mse(4000)={r.mse_ratio:.3f}")


# ---------------------------------------------------------------- AC4 FIM

def _mu_complex(z, o, h, alpha, beta, t, delta):
    x, v = z[:2], z[2:]
    p = x[None, :] + (t * delta)[:, None] * v[None, :]
    w = p[:, None, :] - o[None, :, :]
    d2 = (w * w).sum(-1) + h[None, :] ** 2
    return beta[None, :] + alpha[None, :] * np.log(d2) / (2.0 * LN10)


def fim_oracle(topo, x, v, params, T, delta):
    """sum_t,q grad mu grad mu^T / sigma^2 with complex-step gradients of the log10 mean."""
    o, h = topo.positions, topo.heights
    al = np.array([params[q][0] for q in topo.ids])
    sg = np.array([params[q][1] for q in topo.ids])
    t = np.arange(1, T + 1, dtype=float)
    z0 = np.concatenate([x, v]).astype(complex)
    J = np.empty((T, len(al), 4))
    step = 1e-30
    for k in range(4):
        z = z0.copy()
        z[k] += 1j * step
        J[..., k] = _mu_complex(z, o, h, al, np.zeros_like(al), t, delta).imag / step
    W = J / sg[None, :, None]
    return np.einsum("tqi,tqj->ij", W, W)


def ac4(seed: int = 0, n: int = 100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        Q = int(rng.integers(1, 6))
        st = tuple(BaseStation(i, tuple(rng.uniform(-100, 100, 2)), 1, float(rng.uniform(0, 20)))
                   for i in range(Q))
        topo = Topology(st, (-200, -200, 200, 200), math.inf)
        x, v = rng.uniform(-50, 50, 2), rng.uniform(-10, 10, 2)
        params = {q: (float(rng.uniform(-40, -10)), float(rng.uniform(0.1, 2))) for q in topo.ids}
        T, delta = int(rng.integers(1, 60)), float(rng.uniform(0.1, 1.0))
        F = fim_psi(topo, x, v, params, T, delta).f_psi
        G = fim_oracle(topo, x, v, params, T, delta)
        worst = max(worst, float(np.abs(F - G).max() / np.abs(G).max()))
    return CriterionResult(4, "FIM vs per-term Jacobian oracle", worst < 1e-6,
                           f"max relative error {worst:.2e} over {n} instances")


# ---------------------------------------------------------------- AC5 separability

def separable_dataset(seed: int = 0, M: int = 24, eta: float = 4.0, T: int = 400):
    tc = TrajConfig(T=T, slot=0.5, gamma=0.9, accel_var=1.0, mean_velocity=(3.0, 1.0), v0=(3.0, 1.0))
    pc = PPConfig(alpha=-25.0, beta=8.0, sigma=0.5, alpha_spread=5.0, beta_spread=3.0, omega=6.0,
                  eta=eta, pad=80.0, min_clearance=5.0)
    return gen_mimo(4, M, "separable", tc, pc, np.random.default_rng(seed))


def ac5(seed: int = 0):
    topo, traj, series, truth = separable_dataset(seed)
    worst_a = worst_b = ripple = 0.0
    sweep = np.linspace(0.0, 2 * math.pi, 20001)
    for q in topo.ids:
        pats = truth.pp.patterns[q]
        agg = aggregate_gain(pats, sweep) / len(pats)
        ripple = max(ripple, float(agg.max() - agg.min()))
        c_bar = float(agg.mean())
        a2, b2 = fit_path_loss_aggregate(series, traj, topo, q)
        a1, b1, _ = fit_path_loss_residual(series, traj, topo, q, pats)
        worst_a = max(worst_a, abs(a1 - a2))
        worst_b = max(worst_b, abs(b1 - b2 + c_bar))
    ok = worst_a < 1e-6 and worst_b < 1e-6
    return CriterionResult(5, "path-loss separability", ok,
                           f"|da|={worst_a:.2e} |db+C|={worst_b:.2e} (gain ripple {ripple:.1e} dB)")


# ---------------------------------------------------------------- AC6 log-domain gradient identity

def _central_grad(f, b, h=1e-6):
    g = np.empty(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h * max(1.0, abs(b[k]))
        g[k] = (f(b + e) - f(b - e)) / (2 * e[k])
    return g


def ac6(seed: int = 0, n: int = 50):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(10, 60))
        u = rng.uniform(-1.0, 1.0, m)
        true = np.array([-rng.uniform(0.5, 6), rng.uniform(-2, 2), rng.uniform(0.5, 3)])
        y = np.exp(true[0] * u * u + true[1] * u + true[2]) * np.exp(0.2 * rng.standard_normal(m))
        b = true + 0.3 * rng.standard_normal(3)
        B = np.exp(b[0] * u * u + b[1] * u + b[2])
        lam = pattern_weights(y, B)

        def f21(c):
            return float(((y - np.exp(c[0] * u * u + c[1] * u + c[2])) ** 2).sum())

        def f22(c):
            return float((lam * (np.log(y) - (c[0] * u * u + c[1] * u + c[2])) ** 2).sum())

        g21, g22 = _central_grad(f21, b), _central_grad(f22, b)
        worst = max(worst, float((np.abs(g21 - g22) / np.maximum(1.0, np.abs(g21))).max()))
    return CriterionResult(6, "log-domain pattern gradient identity", worst < 1e-6,
                           f"max componentwise gap {worst:.2e} over {n} points")


# ---------------------------------------------------------------- AC7 Viterbi exactness

def _chebyshev_neighbours(V, tau, K):
    d = np.abs(V[:, None, :] - V[None, :, :]).max(-1)
    return [set(np.nonzero(d <= K * tau + 1e-9)[0].tolist()) for d in d]


def brute_force_map(series, pp, mp, V, nbrs, topo):
    """Exhaustive MAP path: emissions from the per-observation likelihood, transitions normalised by hand."""
    T, n = series.T, len(V)
    obs = series.observations()
    emis = np.array([[log_likelihood_obs(o, V[i], pp, topo) for i in range(n)] for o in obs])

    def logp(c, b, a):
        dens = {j: log_transition(V[j], V[b], V[a], mp) for j in nbrs[b]}
        m = max(dens.values())
        return dens[c] - (m + math.log(sum(math.exp(v - m) for v in dens.values())))

    best, best_path = -math.inf, None
    for path in itertools.product(range(n), repeat=T):
        if any(path[t] not in nbrs[path[t - 1]] for t in range(1, T)):
            continue
        s = sum(emis[t, path[t]] for t in range(T))
        s += sum(logp(path[t], path[t - 1], path[t - 2]) for t in range(2, T))
        if s > best + 1e-12:
            best, best_path = s, path
    return best_path, best


def random_viterbi_instance(rng):
    nx, ny = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    while nx * ny < 2:
        nx, ny = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    tau = float(rng.uniform(1.0, 5.0))
    delta = 0.5
    K = int(rng.integers(1, 3))
    v_max = K * tau / delta * 0.999
    graph = build_grid((0.0, 0.0, (nx - 1) * tau, (ny - 1) * tau), tau, v_max, delta)
    Q = int(rng.integers(1, 3))
    st = tuple(BaseStation(q, tuple(rng.uniform(-20, 30, 2)), int(rng.integers(1, 3)), 1.0) for q in range(Q))
    topo = Topology(st, (-30, -30, 40, 40), math.inf)
    pl = {q: PathLossParams(float(rng.uniform(-40, -10)), float(rng.uniform(0, 10)), float(rng.uniform(0.5, 3)))
          for q in range(Q)}
    pat = {s.id: [BeamPattern(float(rng.uniform(0, 10)), float(rng.uniform(0.5, 4)), float(rng.uniform(0, 6.28)))
                  for _ in range(s.beam_count)] for s in st}
    pp = PropagationParams(pl, pat)
    T = int(rng.integers(1, 6))
    keys = topo.beam_keys()
    vals = rng.uniform(-60, -10, (T, len(keys)))
    vals[rng.random(vals.shape) < 0.3] = np.nan
    series = MeasurementSeries(delta, keys, vals)
    mp = MobilityParams(tuple(rng.uniform(-3, 3, 2)), float(rng.uniform(0.5, 20)), float(rng.uniform(0.1, 0.95)),
                        delta)
    return graph, topo, pp, mp, series, tau, K


def ac7(seed: int = 0, n: int = 200):
    rng = np.random.default_rng(seed)
    bad = 0
    worst = 0.0
    for _ in range(n):
        graph, topo, pp, mp, series, tau, K = random_viterbi_instance(rng)
        V = graph.vertices
        st = ViterbiStats()
        got = viterbi2(series, pp, mp, graph, NO_PRUNE, topo, stats=st)
        ids = graph.nearest(got.positions)
        path, score = brute_force_map(series, pp, mp, V, _chebyshev_neighbours(V, tau, K), topo)
        gap = abs(st.score - score)
        worst = max(worst, gap / max(1.0, abs(score)))
        if tuple(int(i) for i in ids) != tuple(path) or gap > 1e-9 * max(1.0, abs(score)):
            bad += 1
    return CriterionResult(7, "Viterbi vs exhaustive enumeration", bad == 0,
                           f"{bad} mismatches in {n} instances (max score gap {worst:.1e})")


# ---------------------------------------------------------------- AC8 mobility closed form

def p1_objective(z, x, gamma, delta):
    """Negative Gauss-Markov log-likelihood per slot in (v1, v2, log sigma_v^2), with its gradient."""
    v, s2 = z[:2], math.exp(z[2])
    r = x[2:] - (1 + gamma) * x[1:-1] + gamma * x[:-2] - (1 - gamma) * delta * v
    n = len(r)
    var = (1 - gamma ** 2) * delta ** 2 * s2
    ss = float((r * r).sum())
    f = (n * math.log(2 * math.pi * var) + 0.5 * ss / var) / n
    gv = -(1 - gamma) * delta * r.sum(0) / var / n
    gs = (n - 0.5 * ss / var) / n
    return f, np.array([gv[0], gv[1], gs])


def _newton_polish(z, x, gamma, delta, steps=4, h=1e-6):
    """A few Newton steps on the analytic gradient with a central-difference Hessian."""
    for _ in range(steps):
        g = p1_objective(z, x, gamma, delta)[1]
        H = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            H[:, k] = (p1_objective(z + e, x, gamma, delta)[1] - p1_objective(z - e, x, gamma, delta)[1]) / (2 * h)
        z = z - np.linalg.solve(0.5 * (H + H.T), g)
    return z


def ac8(seed: int = 0, n: int = 100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        gamma, delta = float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.1, 2.0))
        mp = MobilityParams(tuple(rng.uniform(-15, 15, 2)), float(rng.uniform(0.1, 10)), gamma, delta)
        T = int(rng.integers(3, 300))
        x0 = rng.uniform(-50, 50, 2)
        traj = simulate(x0, x0 + delta * rng.uniform(-10, 10, 2), mp, T, rng)
        v, s2 = estimate_mobility(traj, gamma, delta)
        z0 = np.array([mp.mean_velocity[0] + 1.0, mp.mean_velocity[1] - 1.0, math.log(mp.accel_var) + 0.5])
        x = traj.positions
        res = optimize.minimize(p1_objective, z0, args=(x, gamma, delta), jac=True, method="BFGS",
                                options={"gtol": 1e-14, "maxiter": 10000})
        z = _newton_polish(res.x, x, gamma, delta)
        zv, zs = z[:2], math.exp(z[2])
        err = max(float(np.abs(zv - v).max() / max(1.0, np.abs(v).max())), abs(zs - s2) / max(1.0, s2))
        worst = max(worst, err)
    return CriterionResult(8, "closed-form mobility vs numeric maximiser", worst < 1e-8,
                           f"max relative disagreement {worst:.2e} over {n} trajectories")


# ---------------------------------------------------------------- AC9 blind recovery

def ac9(seed: int = 0):
    r = recovery_experiment(RecoveryScenario(), RecoverConfig(), seed=seed)
    e = r.errors
    ok = e["proposed"] <= 10.0 and 2 * e["proposed"] <= e["mar"] and 2 * e["proposed"] <= e["wcl"]
    return CriterionResult(9, "blind recovery E_l <= 10 m and 2x baselines", ok,
                           f"proposed {e['proposed']:.2f} m, MaR {e['mar']:.2f} m, WCL {e['wcl']:.2f} m")


# ---------------------------------------------------------------- AC10 monotone objective

def _monotone(trace):
    return all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(trace, trace[1:]))


def ac10(seed: int = 0, n: int = 12):
    runs = bad = 0
    for k in range(n):
        rng = np.random.default_rng(seed + k)
        tc = TrajConfig(T=60, slot=0.5, gamma=0.9, accel_var=0.5, v0=(4.0, 1.0), mean_velocity=(4.0, 1.0))
        if k % 2 == 0:
            topo, traj, series, truth = gen_scenario1(5, tc, PPConfig(sigma=0.5, pad=30.0), rng)
        else:
            topo, traj, series, truth = gen_mimo(4, 3, "sector", tc, PPConfig(sigma=0.5, pad=30.0), rng)
        graph = build_grid(topo.region, 4.0, 12.0, 0.5)
        for mode in ("blind", "gma", "m1"):
            cfg = RecoverConfig(v_max=12.0, mode=mode, max_outer=6, refine_iters=50)
            res = recover(series, graph, 0.9, 0.5, cfg, topo=topo, rng=np.random.default_rng(k),
                          truth_pp=truth.pp)
            runs += 1
            bad += not (_monotone(res.trace) and _monotone(res.warm_trace))
    return CriterionResult(10, "objective trace non-decreasing", bad == 0, f"{runs - bad}/{runs} runs monotone")


# ---------------------------------------------------------------- AC11 annulus integral

def ac11(seed: int = 0, n: int = 20):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        r0 = float(rng.uniform(0.5, 20))
        R = r0 * float(np.exp(rng.uniform(0.05, 5)))
        q, c = expected_projection_integral(R, r0), expected_projection_closed(R, r0)
        worst = max(worst, abs(q - c) / c)
    return CriterionResult(11, "annulus integral vs pi ln(R/r0)", worst < 1e-4,
                           f"max relative error {worst:.2e} over {n} pairs")


# ---------------------------------------------------------------- AC12 prediction

def ac12(seed: int = 0):
    r = prediction_experiment(PredictionScenario(), seed)
    m = r.metrics
    p, mi, ar = m["proposed"], m["mi"], m["ar"]
    ok = p["eq1"] < mi["eq1"] and p["eq1"] < ar["eq1"] and p["ea"] < mi["ea"] and p["ea"] < ar["ea"]
    body = "; ".join(f"{k} Eq1={v['eq1']:.3f} Ea={v['ea']:.2f} Ee4={v['ee4']:.3f}" for k, v in m.items())
    return CriterionResult(12, "prediction beats MI and AR on E_q(1) and E_a", ok,
                           f"{body} ({r.n_queries} queries)")


CRITERIA = {
    1: "scaling x", 2: "scaling v", 3: "plateau", 4: "FIM", 5: "separability", 6: "pattern gradient",
    7: "Viterbi", 8: "mobility", 9: "blind recovery", 10: "monotone objective", 11: "annulus integral",
    12: "prediction",
}

_CACHE = {}


def run_criterion(n: int, workers: int = 1, seed: int = 0) -> CriterionResult:
    if n in (1, 2):
        key = ("scaling", workers, seed)
        if key not in _CACHE:
            _CACHE[key] = ac1_ac2(workers, seed)
        return _CACHE[key][n - 1]
    table = {3: lambda: ac3(workers, seed), 4: lambda: ac4(seed), 5: lambda: ac5(seed), 6: lambda: ac6(seed),
             7: lambda: ac7(seed), 8: lambda: ac8(seed), 9: lambda: ac9(seed), 10: lambda: ac10(seed),
             11: lambda: ac11(seed), 12: lambda: ac12(seed)}
    if n not in table:
        raise KeyError(f"no acceptance criterion {n}")
    return table[n]()
