"""Command-line entry point.

Every experiment writes ``results.csv`` (numbers only, stable across runs and
worker counts) and ``results.json`` (config echo, version, wall time, seeds,
summary).  Exit status: 0 success, 2 invalid configuration, 3 particle budget
exhausted.
"""

from __future__ import annotations

import argparse
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dispersion import dispersion_scan
from .environment import Environment, Window, sample_environment
from .estimators import (
    ParticleBudgetError,
    concentration_from_points,
    estimate_Z_crude,
    estimate_Z_smc,
    extrapolate_p,
    first_disaster_mechanism,
    free_energy_curve,
    stripe_influence,
    superadditivity_check,
)
from .smc import SmcConfig
from .strategy import orderstat_identities, simulate_strategy
from .streams import Stream

EXPERIMENTS = (
    "sample-env",
    "estimate-z",
    "free-energy",
    "beta-sweep",
    "superadditivity",
    "concentration",
    "stripe-influence",
    "strategy-verify",
    "orderstat-check",
    "dispersion",
    "nonintegrability",
)

DEFAULTS = {
    "seed": 0,
    "dimension": 1,
    "beta": "inf",
    "betas": "0,0.5,1,2,4,8,inf",
    "t": None,
    "n_env": 20,
    "n_particles": 10_000,
    "slab_length": 1.0,
    "ess_threshold": 0.5,
    "resampling": "systematic",
    "n_islands": 8,
    "n_paths": 100_000,
    "method": "smc",
    "env_file": None,
    "stripe": None,
    "s": 4.0,
    "k": "2,3,5",
    "n_samples": 1_000_000,
    "m_grid": "100,1000,10000",
    "modified": False,
    "truncate": False,
    "out": "results",
    "threads": None,
}

DEFAULT_T = {
    "sample-env": "4",
    "estimate-z": "2",
    "free-energy": "8,16,32,64",
    "beta-sweep": "8,16,32",
    "superadditivity": "4",
    "concentration": "8,16,32,64",
    "stripe-influence": "8",
    "strategy-verify": "8",
    "dispersion": "8,16,32",
    "nonintegrability": "4",
    "orderstat-check": "0",
}


class ConfigError(ValueError):
    pass


# --- parsing -------------------------------------------------------------------------


def parse_beta(text) -> float:
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        s = str(text).strip().lower()
        value = math.inf if s in ("inf", "infinity") else None
        if value is None:
            try:
                value = float(s)
            except ValueError:
                raise ConfigError(f"invalid beta {text!r}") from None
    if math.isnan(value) or value < 0:
        raise ConfigError(f"beta must be >= 0 or 'inf', got {text!r}")
    return value


def parse_list(text, kind=float) -> list:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [v for v in str(text).split(",") if v.strip()]
    try:
        return [kind(v) for v in items]
    except ValueError:
        raise ConfigError(f"invalid list {text!r}") from None


def parse_grid(text) -> list:
    grid = parse_list(text, float)
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("t-grid must be nonempty and strictly increasing")
    if any(v < 0 for v in grid):
        raise ConfigError("t values must be >= 0")
    return grid


def beta_text(beta: float) -> str:
    return "inf" if math.isinf(beta) else repr(float(beta))


def num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="disaster-polymer",
        description="Brownian polymer among space-time Poissonian disasters: simulation experiments.",
    )
    p.add_argument("experiment", help="one of: " + ", ".join(EXPERIMENTS))
    p.add_argument("--config", help="JSON file with option values; command-line flags win")
    p.add_argument("--seed", type=int)
    p.add_argument("--dimension", type=int)
    p.add_argument("--beta")
    p.add_argument("--betas", help="comma-separated betas for beta-sweep")
    p.add_argument("--t", help="horizon or comma-separated increasing grid")
    p.add_argument("--n-env", type=int, dest="n_env")
    p.add_argument("--n-particles", type=int, dest="n_particles")
    p.add_argument("--slab-length", type=float, dest="slab_length")
    p.add_argument("--ess-threshold", type=float, dest="ess_threshold")
    p.add_argument("--resampling")
    p.add_argument("--n-islands", type=int, dest="n_islands")
    p.add_argument("--n-paths", type=int, dest="n_paths")
    p.add_argument("--method", choices=("smc", "crude", "both"))
    p.add_argument("--env-file", dest="env_file", help="environment JSON for estimate-z")
    p.add_argument("--stripe", type=int, help="stripe index r for stripe-influence (default t/2)")
    p.add_argument("--s", type=float, help="first horizon for superadditivity")
    p.add_argument("--k", help="comma-separated k values for orderstat-check")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--m-grid", dest="m_grid")
    p.add_argument("--modified", action="store_const", const=True)
    p.add_argument("--truncate", action="store_const", const=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker count (POLYMER_THREADS also works)")
    return p


def resolve(args: argparse.Namespace) -> dict:
    if args.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {args.experiment!r}; valid names: {', '.join(EXPERIMENTS)}")
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["experiment"] = args.experiment
    if cfg["t"] is None:
        cfg["t"] = DEFAULT_T[args.experiment]
    cfg["beta"] = beta_text(parse_beta(cfg["beta"]))
    cfg["t"] = ",".join(num(v) for v in parse_grid(cfg["t"]))
    for key in ("n_env", "n_particles", "n_paths", "n_samples", "n_islands", "dimension"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not 0 <= int(cfg["seed"]) < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    try:
        smc_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def smc_config(cfg: dict) -> SmcConfig:
    return SmcConfig(
        int(cfg["n_particles"]),
        float(cfg["slab_length"]),
        float(cfg["ess_threshold"]),
        str(cfg["resampling"]),
        int(cfg["n_islands"]),
    )


# --- experiments ---------------------------------------------------------------------


def _sample_env(cfg):
    (t,) = parse_grid(cfg["t"])[:1]
    d = int(cfg["dimension"])
    env = sample_environment(Window.for_horizon(t, d), Stream(int(cfg["seed"])).spawn("sample-env"))
    header = ["time"] + [f"x{c + 1}" for c in range(d)]
    rows = [[s] + list(x) for s, x in zip(env.times.tolist(), env.positions.tolist())]
    return header, rows, {"count": len(env), "environment": env.to_dict()}


def _estimate_z(cfg):
    t = parse_grid(cfg["t"])[0]
    beta = parse_beta(cfg["beta"])
    seed = Stream(int(cfg["seed"]))
    if cfg["env_file"]:
        try:
            env = Environment.from_json(Path(cfg["env_file"]).read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read environment: {exc}") from None
    else:
        env = sample_environment(Window.for_horizon(t, int(cfg["dimension"])), seed.spawn("estimate-z", "env"))
    if t > env.window.t_max:
        raise ConfigError("window too small for the requested horizon")
    header = ["beta", "t", "method", "value", "stderr", "log_value", "n", "censored_count"]
    rows, summary = [], {"n_disasters": len(env)}
    methods = ("crude", "smc") if cfg["method"] == "both" else (cfg["method"],)
    for m in methods:
        if m == "crude":
            est = estimate_Z_crude(env, beta, t, bool(cfg["modified"]), int(cfg["n_paths"]), seed.spawn("estimate-z"), truncate=bool(cfg["truncate"]))
        else:
            est = estimate_Z_smc(env, beta, t, bool(cfg["modified"]), smc_config(cfg), seed.spawn("estimate-z"), truncate=bool(cfg["truncate"]))
        rows.append([beta_text(beta), t, m, est.value, est.stderr, est.log_value, est.n, int(est.extinct)])
        summary[m] = {"flags": list(est.flags), "seed": est.provenance()}
    return header, rows, summary


FE_HEADER = ["beta", "t", "value", "stderr", "n", "censored_count", "rate", "rate_stderr"]


def _fe_rows(points):
    return [[beta_text(p.beta), p.t, p.a_hat.value, p.a_hat.stderr, p.n_env, p.censored, p.rate, p.rate_stderr] for p in points]


def _extrapolation(points) -> dict:
    if len(points) < 3:
        return {}
    ex = extrapolate_p(points)
    return {"p_hat": ex.p_hat, "interval": list(ex.interval), "slope": ex.slope, "chi2": ex.chi2}


def _free_energy(cfg):
    beta = parse_beta(cfg["beta"])
    pts = free_energy_curve(beta, parse_grid(cfg["t"]), int(cfg["n_env"]), smc_config(cfg), int(cfg["seed"]), workers=cfg["threads"])
    return FE_HEADER, _fe_rows(pts), {"extrapolation": _extrapolation(pts)}


def _beta_sweep(cfg):
    rows, summary = [], {}
    for beta in parse_list(cfg["betas"], parse_beta):
        pts = free_energy_curve(beta, parse_grid(cfg["t"]), int(cfg["n_env"]), smc_config(cfg), int(cfg["seed"]), workers=cfg["threads"])
        rows += _fe_rows(pts)
        summary[beta_text(beta)] = _extrapolation(pts)
    return FE_HEADER, rows, {"extrapolation": summary}


def _superadditivity(cfg):
    beta = parse_beta(cfg["beta"])
    t = parse_grid(cfg["t"])[0]
    rep = superadditivity_check(beta, float(cfg["s"]), t, int(cfg["n_env"]), smc_config(cfg), int(cfg["seed"]), workers=cfg["threads"])
    header = ["beta", "s", "t", "a_s", "a_t", "a_sum", "slack", "stderr", "bound", "holds"]
    row = [beta_text(beta), rep.s, rep.t, rep.a_s.value, rep.a_t.value, rep.a_sum.value, rep.slack, rep.stderr, rep.bound, rep.holds]
    return header, [row], {"censored": [rep.a_s.censored, rep.a_t.censored, rep.a_sum.censored]}


def _concentration(cfg):
    beta = parse_beta(cfg["beta"])
    pts = free_energy_curve(beta, parse_grid(cfg["t"]), int(cfg["n_env"]), smc_config(cfg), int(cfg["seed"]), workers=cfg["threads"])
    rep = concentration_from_points(pts, int(cfg["seed"]))
    header = ["beta", "t", "sd", "sd_lo", "sd_hi", "n_env"]
    rows = [[beta_text(beta), t, sd, ci[0], ci[1], p.n_env] for t, sd, ci, p in zip(rep.t_grid, rep.sd, rep.sd_ci, pts)]
    return header, rows, {"slope": rep.slope}


def _stripe(cfg):
    beta = parse_beta(cfg["beta"])
    t = parse_grid(cfg["t"])[0]
    r = int(cfg["stripe"]) if cfg["stripe"] is not None else int(t // 2)
    est = stripe_influence(beta, t, r, int(cfg["n_env"]), smc_config(cfg), int(cfg["seed"]), workers=cfg["threads"])
    header = ["beta", "t", "r", "value", "stderr", "n", "censored_count"]
    return header, [[beta_text(beta), t, r, est.value, est.stderr, est.n, est.censored]], {}


def _strategy(cfg):
    from .estimators import sample_horizon_environment

    t = parse_grid(cfg["t"])[0]
    seed = int(cfg["seed"])
    header = ["env", "t", "n_disasters", "n_renewals", "log_p_strategy", "log_p_strategy_se", "log_p_tube", "log_p_tube_se", "violations"]
    rows = []
    for j in range(int(cfg["n_env"])):
        env = sample_horizon_environment(seed, "strategy-verify", j, t)
        res = simulate_strategy(env, t, n_paths=min(int(cfg["n_paths"]), 4000), seed=Stream(seed).spawn("strategy-verify", j))
        s, tb = res.strategy, res.tube
        rows.append([j, t, res.trace.count, res.trace.m_last, s.log_value, s.log_stderr, tb.log_value, tb.log_stderr, res.violations])
    return header, rows, {}


def _orderstat(cfg):
    header = ["k", "pmf_pvalue", "gamma_pvalue", "renyi_match", "independence_pvalue"]
    rows, reports = [], {}
    for k in parse_list(cfg["k"], int):
        rep = orderstat_identities(k, int(cfg["n_samples"]), int(cfg["seed"]))
        match = "|".join(rep["renyi"]["matching"]) or "none"
        rows.append([k, rep["pmf_chi2"]["pvalue"], rep["gamma_ks"]["pvalue"], match, rep["independence"]["min_pvalue"]])
        reports[str(k)] = json.loads(json.dumps(rep, default=lambda o: o.item() if hasattr(o, "item") else str(o)))
    return header, rows, {"reports": reports}


def _dispersion(cfg):
    beta = parse_beta(cfg["beta"])
    scan = dispersion_scan(beta, parse_grid(cfg["t"]), int(cfg["n_env"]), smc_config(cfg), int(cfg["seed"]), workers=cfg["threads"])
    header = ["beta", "t", "p", "mean_abs_log", "zero_count", "min_m", "n_env"]
    rows = []
    for k, t in enumerate(scan.t_grid):
        for p in scan.p_values:
            vals = scan.m_values[p][k]
            rows.append([beta_text(beta), t, p, scan.mean_abs_log[p][k], scan.zero_counts[p][k], float(np.min(vals)), len(vals)])
    mins = [float(np.min(v)) for v in scan.m_values[scan.p_values[0]]]
    summary = {
        "floor_threshold": scan.threshold,
        "floor_exponent": scan.floor_exponent,
        "min_m0_t4": scan.floor_products.tolist(),
        "min_m0_t2": [m * t**2 for m, t in zip(mins, scan.t_grid.tolist())],
        "ancestral_ess": scan.ancestral_ess.tolist(),
    }
    return header, rows, summary


def _nonintegrability(cfg):
    t = parse_grid(cfg["t"])[0]
    rep = first_disaster_mechanism(parse_list(cfg["m_grid"]), int(cfg["n_samples"]), int(cfg["seed"]), t=t, d=int(cfg["dimension"]))
    header = ["m", "mean", "stderr", "exact", "modified_mean"]
    rows = [[m, a, b, c, e] for m, a, b, c, e in zip(rep.m_grid, rep.means, rep.stderrs, rep.exact, rep.modified_means)]
    return header, rows, {"rate": rep.rate, "slope": rep.slope, "modified_ratio": rep.modified_ratio}


RUNNERS = {
    "sample-env": _sample_env,
    "estimate-z": _estimate_z,
    "free-energy": _free_energy,
    "beta-sweep": _beta_sweep,
    "superadditivity": _superadditivity,
    "concentration": _concentration,
    "stripe-influence": _stripe,
    "strategy-verify": _strategy,
    "orderstat-check": _orderstat,
    "dispersion": _dispersion,
    "nonintegrability": _nonintegrability,
}


# --- output --------------------------------------------------------------------------


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(num(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def run(cfg: dict) -> int:
    start = time.perf_counter()
    header, rows, summary = RUNNERS[cfg["experiment"]](cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", header, rows)
    meta = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "version": version_string(),
        "wall_time_s": time.perf_counter() - start,
        "seed": {"master_seed": int(cfg["seed"]), "tag": cfg["experiment"]},
        "summary": summary,
    }
    (out / "results.json").write_text(json.dumps(meta, indent=2, default=str) + "\n", encoding="utf-8")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return run(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ParticleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
