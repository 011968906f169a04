"""Config-driven command line: ``blindmap <command> --config cfg.json --out DIR``.

Exit codes: 0 ok, 1 configuration or input error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io as bio
from .crlb import MLEScenario
from .errors import BlindMapError, ConfigError
from .estimators import PatternFitConfig, estimate_mobility, fit_propagation
from .experiments import PredictionScenario, plateau_experiment, prediction_experiment, scaling_experiment
from .mobility import MobilityParams
from .radiomap import FingerprintIndex, PredictConfig, build_map, load_map, predict_next, save_map
from .synth import PPConfig, TrajConfig, gen_mimo, gen_scenario1, gen_scenario2
from .trajectory import (KMH, PruneConfig, RecoverConfig, baseline_mar, baseline_wcl, build_grid, localization_error,
                         recover)

DEFAULTS = {
    "tau": 1.0,
    "v_max_kmh": 120.0,
    "zeta": 0.8,
    "lr": 0.01,
    "epsilon": 0.01,
    "gamma": 0.9,
}

COMMANDS = ("synth", "fit", "recover", "crlb", "predict", "eval", "repro")


class Run:
    """Output directory plus the list of files written, for the manifest."""

    def __init__(self, command, out, config, seed, workers):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.seed = seed
        self.workers = workers
        self.outputs = []

    def path(self, name) -> Path:
        self.outputs.append(name)
        return self.out / name

    def manifest(self):
        self.outputs.append("manifest.json")
        bio.write_json(self.out / "manifest.json", {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "workers": self.workers,
            "versions": {"blindmap": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "outputs": sorted(set(self.outputs)),
        })


def _pick(cls, d: dict):
    """Dataclass from the keys of ``d`` that name its fields; unknown keys are errors."""
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kw = {k: (tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v)
          for k, v in d.items()}
    return cls(**kw)


def _need(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config needs {key!r}")
    return cfg[key]


def _rel(cfg, key, base):
    p = Path(_need(cfg, key))
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------- commands

def cmd_synth(run: Run, cfg, base):
    rng = np.random.default_rng(run.seed)
    tc = _pick(TrajConfig, cfg.get("traj", {}))
    pc = _pick(PPConfig, cfg.get("pp", {}))
    sc = str(cfg.get("scenario", "2"))
    if sc == "1":
        topo, traj, series, truth = gen_scenario1(int(cfg.get("Q", 8)), tc, pc, rng)
    elif sc == "2":
        topo, traj, series, truth = gen_scenario2(float(cfg.get("kappa", 1.02e-3)), float(cfg.get("R", 50.0)),
                                                  tc, pc, rng)
    elif sc == "mimo":
        R = cfg.get("R")
        topo, traj, series, truth = gen_mimo(int(cfg.get("Q", 7)), int(cfg.get("M", 7)), cfg.get("layout", "sector"),
                                             tc, pc, rng, positions=cfg.get("positions"),
                                             connect_radius=math.inf if R is None else float(R))
    else:
        raise ConfigError(f"unknown scenario {sc!r}; use 1, 2 or mimo")
    bio.save_topology(run.path("topology.json"), topo)
    bio.save_trajectory(run.path("trajectory.csv"), traj)
    bio.save_series(run.path("measurements.csv"), series)
    run.outputs.append("measurements.csv.json")
    bio.write_json(run.path("truth.json"), truth.to_dict())


def _pattern_cfg(cfg):
    return PatternFitConfig(epsilon=float(cfg.get("epsilon", DEFAULTS["epsilon"])))


def cmd_fit(run: Run, cfg, base):
    topo = bio.load_topology(_rel(cfg, "topology", base))
    series = bio.load_series(_rel(cfg, "measurements", base))
    traj = bio.load_trajectory(_rel(cfg, "trajectory", base))
    flags = []
    pp = fit_propagation(series, traj, topo, _pattern_cfg(cfg), flags=flags)
    gamma = float(cfg.get("gamma", DEFAULTS["gamma"]))
    mp = None
    if gamma < 1 and len(traj) >= 3:
        v, s2 = estimate_mobility(traj, gamma, series.slot_duration)
        mp = MobilityParams((v[0], v[1]), s2, gamma, series.slot_duration)
    bio.save_params(run.path("params.json"), pp, mp)
    bio.write_json(run.path("fit_flags.json"), [list(f) for f in flags])


def _truth_pp(cfg, base):
    if "truth" not in cfg:
        return None
    d = bio.read_json(_rel(cfg, "truth", base))
    from .channel import PropagationParams
    return PropagationParams.from_dict(d["pp"] if "pp" in d else d["propagation"])


def _grid(cfg, topo, delta):
    region = tuple(cfg["region"]) if "region" in cfg else topo.region
    return build_grid(region, float(cfg.get("tau", DEFAULTS["tau"])),
                      float(cfg.get("v_max_kmh", DEFAULTS["v_max_kmh"])) * KMH, delta)


def cmd_recover(run: Run, cfg, base):
    topo = bio.load_topology(_rel(cfg, "topology", base))
    series = bio.load_series(_rel(cfg, "measurements", base))
    delta = series.slot_duration
    graph = _grid(cfg, topo, delta)
    rc = RecoverConfig(v_max=float(cfg.get("v_max_kmh", DEFAULTS["v_max_kmh"])) * KMH,
                       lr=float(cfg.get("lr", DEFAULTS["lr"])),
                       max_outer=int(cfg.get("max_outer", 15)), n_restarts=int(cfg.get("n_restarts", 1)),
                       prune=PruneConfig(zeta=float(cfg.get("zeta", DEFAULTS["zeta"]))),
                       pattern=_pattern_cfg(cfg), mode=cfg.get("mode", "blind"),
                       warm_start=cfg.get("warm_start", "aggregate"))
    res = recover(series, graph, float(cfg.get("gamma", DEFAULTS["gamma"])), delta, rc, topo=topo,
                  rng=np.random.default_rng(run.seed), truth_pp=_truth_pp(cfg, base))
    bio.save_trajectory(run.path("recovered.csv"), res.trajectory)
    bio.save_params(run.path("params.json"), res.pp, res.mp)
    bio.save_curve(run.path("trace.csv"), range(1, len(res.trace) + 1), res.trace, header=("iteration", "objective"))


def cmd_eval(run: Run, cfg, base):
    truth = bio.load_trajectory(_rel(cfg, "truth_trajectory", base))
    rows = []
    rec = _need(cfg, "recovered")
    for name, p in (rec.items() if isinstance(rec, dict) else [("proposed", rec)]):
        p = Path(p) if Path(p).is_absolute() else base / p
        rows.append((name, localization_error(truth, bio.load_trajectory(p))))
    if "measurements" in cfg and "topology" in cfg:
        topo = bio.load_topology(_rel(cfg, "topology", base))
        series = bio.load_series(_rel(cfg, "measurements", base))
        rows.append(("mar", localization_error(truth, baseline_mar(series, topo))))
        rows.append(("wcl", localization_error(truth, baseline_wcl(series, topo))))
    bio.save_table(run.path("errors.csv"), ("method", "E_l"), rows)


def cmd_crlb(run: Run, cfg, base, figure):
    if figure == "scaling":
        sc = _pick(MLEScenario, cfg.get("scenario", {}))
        r = scaling_experiment(int(cfg.get("trials", 50)), cfg.get("T_list", [200, 400, 800, 1600, 3200]),
                               run.seed, run.workers, sc)
        bio.save_curve(run.path("mse_x.csv"), r.T, r.mse_x)
        bio.save_curve(run.path("mse_v.csv"), r.T, r.mse_v)
        bio.save_curve(run.path("bound_x.csv"), r.T, r.bound_x)
        bio.save_curve(run.path("bound_v.csv"), r.T, r.bound_v)
        bio.write_json(run.path("slopes.json"), {"x": r.slope_x, "v": r.slope_v, "failed": r.n_failed})
    elif figure == "plateau":
        r = plateau_experiment(int(cfg.get("trials", 50)), run.seed, run.workers)
        bio.save_curve(run.path("bound_x_limited.csv"), r.T_bound, r.bound_x)
        bio.save_curve(run.path("mse_x_limited.csv"), r.mse_T, r.mse_x)
        bio.write_json(run.path("ratios.json"), {"bound": r.bound_ratio, "mse": r.mse_ratio})
    else:
        raise ConfigError(f"unknown figure {figure!r}; use scaling or plateau")


def cmd_predict(run: Run, cfg, base):
    if cfg.get("experiment"):
        sc = _pick(PredictionScenario, cfg.get("scenario", {}))
        r = prediction_experiment(sc, run.seed)
        rows = [(k, m["eq1"], m["ea"], m["ee4"], m["match_m"]) for k, m in r.metrics.items()]
        bio.save_table(run.path("metrics.csv"), ("method", "E_q1", "E_a", "E_e4", "median_match_m"), rows)
        return
    topo = bio.load_topology(_rel(cfg, "topology", base))
    pp, mp = bio.load_params(_rel(cfg, "params", base))
    if mp is None:
        raise ConfigError("params file needs mobility parameters")
    if "map" in cfg:
        entries = load_map(_rel(cfg, "map", base))
    else:
        csi = bio.load_series(_rel(cfg, "map_csi", base)) if "map_csi" in cfg else None
        entries = build_map(bio.load_trajectory(_rel(cfg, "map_trajectory", base)),
                            bio.load_series(_rel(cfg, "map_measurements", base)), csi)
        save_map(run.path("map.jsonl"), entries)
    series = bio.load_series(_rel(cfg, "measurements", base))
    graph = _grid(cfg, topo, series.slot_duration)
    pc = PredictConfig(history_len=int(cfg.get("history_len", 12)), lr=float(cfg.get("lr", DEFAULTS["lr"])),
                       prune=PruneConfig(zeta=float(cfg.get("zeta", DEFAULTS["zeta"]))))
    index = FingerprintIndex(entries)
    rows = []
    for t in range(pc.history_len, series.T):
        pr = predict_next(series.window(0, t + 1), index, pp, mp, topo, graph, pc)
        rows.append((t + 2, float(pr.x_next[0]), float(pr.x_next[1]),
                     float(pr.entry.location[0]), float(pr.entry.location[1])))
    bio.save_table(run.path("predictions.csv"), ("t", "x_next", "y_next", "entry_x", "entry_y"), rows)


def cmd_repro(run: Run, cfg, base):
    from .acceptance import CRITERIA, run_criterion
    which = cfg.get("criteria", sorted(CRITERIA))
    rows = []
    for n in which:
        res = run_criterion(int(n), workers=run.workers, seed=run.seed)
        print(res.line(), flush=True)
        rows.append((res.number, res.name, "pass" if res.passed else "fail", res.detail))
    bio.save_table(run.path("acceptance.csv"), ("criterion", "name", "result", "detail"), rows)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blindmap", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (paths inside are relative to it)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--figure", default="scaling", help="crlb only: scaling or plateau")
    return p


def run(command: str, config_path=None, out="out", seed: int = 0, workers: int = 1, figure: str = "scaling") -> int:
    try:
        if config_path is not None:
            base = Path(config_path).resolve().parent
            try:
                cfg = bio.read_json(config_path)
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from e
            if not isinstance(cfg, dict):
                raise ConfigError("config must be a JSON object")
        else:
            base, cfg = Path.cwd(), {}
        merged = {**DEFAULTS, **cfg} if command in ("recover", "fit", "predict") else dict(cfg)
        r = Run(command, out, merged, seed, workers)
        if command == "crlb":
            cmd_crlb(r, cfg, base, figure)
            r.config = {**merged, "figure": figure}
        else:
            globals()[f"cmd_{command}"](r, merged, base)
        r.manifest()
    except (ConfigError, FileNotFoundError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"blindmap {command}: configuration error: {e}", file=sys.stderr)
        return 1
    except (BlindMapError, ValueError, ArithmeticError, RuntimeError) as e:
        print(f"blindmap {command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    return run(a.command, a.config, a.out, a.seed, a.workers, a.figure)


if __name__ == "__main__":
    sys.exit(main())
