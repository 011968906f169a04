"""Gauss-Markov mobility: simulation and transition log-density."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateGamma


@dataclass(frozen=True)
class MobilityParams:
    mean_velocity: tuple[float, float]
    accel_var: float
    gamma: float
    slot: float

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.accel_var < 0:
            raise ConfigError("accel_var must be non-negative")
        if not self.slot > 0:
            raise ConfigError("slot duration must be positive")
        v = np.asarray(self.mean_velocity, dtype=float).reshape(2)
        object.__setattr__(self, "mean_velocity", (float(v[0]), float(v[1])))

    @property
    def v(self) -> np.ndarray:
        return np.array(self.mean_velocity)

    @property
    def step_var(self) -> float:
        """Per-axis variance of the positional innovation."""
        return (1.0 - self.gamma ** 2) * self.slot ** 2 * self.accel_var

    def drift(self) -> np.ndarray:
        return (1.0 - self.gamma) * self.slot * self.v


class Trajectory:
    """Ordered 2-D positions, shape (T, 2)."""

    def __init__(self, positions):
        p = np.array(positions, dtype=float).reshape(-1, 2)
        if len(p) < 1:
            raise ConfigError("trajectory needs at least one position")
        if not np.all(np.isfinite(p)):
            raise ConfigError("trajectory has non-finite entries")
        self.positions = p

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        return self.positions[i]

    def __repr__(self):
        return f"Trajectory(T={len(self)})"

    def copy(self) -> "Trajectory":
        return Trajectory(self.positions.copy())


def predicted_mean(x_prev, x_prev2, mp: MobilityParams) -> np.ndarray:
    x_prev = np.asarray(x_prev, dtype=float)
    return (1.0 + mp.gamma) * x_prev - mp.gamma * np.asarray(x_prev2, dtype=float) + mp.drift()


def step(x_prev, x_prev2, mp: MobilityParams, rng: np.random.Generator) -> np.ndarray:
    mean = predicted_mean(x_prev, x_prev2, mp)
    if mp.gamma == 1.0 or mp.accel_var == 0.0:
        return mean
    eps = rng.normal(0.0, math.sqrt(mp.accel_var), size=2)
    return mean + math.sqrt(1.0 - mp.gamma ** 2) * mp.slot * eps


def simulate(x0, x1, mp: MobilityParams, T: int, rng: np.random.Generator) -> Trajectory:
    if T < 2:
        raise ConfigError("simulate needs T >= 2")
    out = np.empty((T, 2))
    out[0] = x0
    out[1] = x1
    for t in range(2, T):
        out[t] = step(out[t - 1], out[t - 2], mp, rng)
    return Trajectory(out)


def transition_residuals(positions, gamma: float, slot: float, v_bar=None) -> np.ndarray:
    """r_t = x_t - (1+g) x_{t-1} + g x_{t-2} - (1-g) delta v_bar for t = 3..T."""
    p = np.asarray(positions, dtype=float)
    r = p[2:] - (1.0 + gamma) * p[1:-1] + gamma * p[:-2]
    if v_bar is not None:
        r = r - (1.0 - gamma) * slot * np.asarray(v_bar, dtype=float)
    return r


def log_transition(x_t, x_prev, x_prev2, mp: MobilityParams):
    """Log of the 2-D Gaussian transition density; vectorised over leading axes of ``x_t``."""
    if mp.gamma >= 1.0:
        raise DegenerateGamma("transition density is a point mass when gamma = 1")
    var = mp.step_var
    if var <= 0:
        raise DegenerateGamma("zero innovation variance")
    r = np.asarray(x_t, dtype=float) - predicted_mean(x_prev, x_prev2, mp)
    out = -math.log(2.0 * math.pi * var) - 0.5 * (r * r).sum(-1) / var
    return float(out) if np.ndim(out) == 0 else out


def transition_loglik(positions, mp: MobilityParams) -> float:
    """Sum of log_transition over t = 3..T."""
    p = np.asarray(positions, dtype=float)
    if len(p) < 3:
        return 0.0
    var = mp.step_var
    if mp.gamma >= 1.0 or var <= 0:
        raise DegenerateGamma("transition density is a point mass")
    r = transition_residuals(p, mp.gamma, mp.slot, mp.v)
    return float(-(len(r)) * math.log(2.0 * math.pi * var) - 0.5 * (r * r).sum() / var)
