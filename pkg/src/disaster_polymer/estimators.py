"""Estimators of survival probabilities, the free energy and related
diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import exp1, logsumexp

from .environment import Environment, Window, restrict, sample_environment, stripe_complement
from .parallel import ordered_map
from .path_survival import hit_matrix, kill_factor, sample_paths, skeleton_times, truncation_mask
from .smc import SmcConfig, run_particles
from .streams import SeedLike, Stream, as_stream

MAX_ESCALATIONS = 2
ESCALATION_FACTOR = 4
CENSOR_LIMIT = 0.2


class ParticleBudgetError(RuntimeError):
    """Too many environments stayed extinct after every particle escalation."""


@dataclass
class Estimate:
    value: float
    stderr: float
    n: int
    master_seed: int
    tag: str
    log_value: float = math.nan
    log_stderr: float = math.nan
    flags: tuple = ()
    censored: int = 0

    def __post_init__(self):
        if not self.stderr >= 0:
            raise ValueError("stderr must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @property
    def extinct(self) -> bool:
        return "extinction" in self.flags

    def provenance(self) -> dict:
        return {"master_seed": self.master_seed, "tag": self.tag}


@dataclass
class FreeEnergyPoint:
    beta: float
    t: float
    a_hat: Estimate
    n_env: int
    log_estimates: np.ndarray
    censored: int = 0

    @property
    def rate(self) -> float:
        return self.a_hat.value / self.t

    @property
    def rate_stderr(self) -> float:
        return self.a_hat.stderr / self.t


def _time_key(t: float) -> int:
    return int(round(t * 1_000_000))


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if math.isnan(beta) or beta < 0:
        raise ValueError("beta must be >= 0")
    return beta


# --- single environment --------------------------------------------------------


def estimate_Z_crude(
    env: Environment,
    beta: float,
    t: float,
    modified: bool = False,
    n_paths: int = 100_000,
    seed: SeedLike = 0,
    *,
    truncate: bool = False,
    chunk: int = 16_384,
) -> Estimate:
    """Plain Monte Carlo mean of the per-path weight exp(-beta * hits)."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    beta = _check_beta(beta)
    stream = as_stream(seed).spawn("crude")
    times = skeleton_times(env, t)
    start = np.zeros(env.dimension)
    factor = kill_factor(beta)
    total = 0.0
    total_sq = 0.0
    done = 0
    c = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        values = sample_paths(times, start, m, stream.spawn(c).generator())
        hits, _ = hit_matrix(times, values, env, t, modified)
        w = factor ** hits.sum(axis=1).astype(float)
        if truncate:
            w = w * truncation_mask(times, values, start, t, stream.spawn(c, "bridge").generator())
        total += float(w.sum())
        total_sq += float(w @ w)
        done += m
        c += 1
    mean = total / n_paths
    var = max(total_sq / n_paths - mean * mean, 0.0) * n_paths / (n_paths - 1)
    se = math.sqrt(var / n_paths)
    log_value = math.log(mean) if mean > 0 else -math.inf
    return Estimate(
        mean, se, n_paths, stream.master, stream.tag, log_value,
        se / mean if mean > 0 else math.inf,
    )


def estimate_Z_smc(
    env: Environment,
    beta: float,
    t: float,
    modified: bool = False,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
    *,
    truncate: bool = False,
) -> Estimate:
    """Particle estimate of the survival probability.

    The value is the mean of the island estimates (each unbiased); the
    standard error is their spread.  ``flags`` contains ``"extinction"`` when
    some island lost every particle.
    """
    beta = _check_beta(beta)
    stream = as_stream(seed).spawn("smc")
    run = run_particles(env, beta, t, config, stream, modified=modified, truncate=truncate)
    k = config.n_islands
    log_mean = float(logsumexp(run.log_z) - math.log(k))
    if math.isfinite(log_mean):
        rel = np.exp(run.log_z - log_mean)
        rel_se = float(np.std(rel, ddof=1) / math.sqrt(k)) if k > 1 else math.inf
    else:
        rel_se = math.inf
    value = math.exp(log_mean) if math.isfinite(log_mean) else 0.0
    se = value * rel_se if math.isfinite(rel_se) else 0.0
    flags = ("extinction",) if run.extinct.any() else ()
    return Estimate(
        value, se, config.n_particles, stream.master, stream.tag, log_mean, rel_se, flags
    )


def annealed_Z(beta: float, t: float) -> float:
    """E[Z_t] = exp(-t (1 - e^{-beta})): the hit count of any path is Poisson(t)."""
    beta = _check_beta(beta)
    if t < 0:
        raise ValueError("t must be >= 0")
    return math.exp(-t * (1.0 - kill_factor(beta)))


def doubling_diagnostic(
    env: Environment,
    beta: float,
    t: float,
    config: SmcConfig,
    seed: SeedLike = 0,
    *,
    modified: bool = True,
    truncate: bool = True,
) -> dict:
    """Compare log-estimates at N and 2N particles; the gap tracks the plug-in
    bias of log(Z-hat)."""
    base = as_stream(seed)
    one = estimate_Z_smc(env, beta, t, modified, config, base.spawn("N"), truncate=truncate)
    two = estimate_Z_smc(env, beta, t, modified, config.scaled(2), base.spawn("2N"), truncate=truncate)
    return {
        "log_z_N": one.log_value,
        "log_z_2N": two.log_value,
        "gap": two.log_value - one.log_value,
        "log_stderr_N": one.log_stderr,
        "log_stderr_2N": two.log_stderr,
    }


# --- many environments ------------------------------------------------------------


def env_stream(seed: SeedLike, tag: str, j: int, t: float) -> Stream:
    return as_stream(seed).spawn(tag, "env", j, _time_key(t))


def path_stream(seed: SeedLike, tag: str, j: int, t: float, attempt: int) -> Stream:
    return as_stream(seed).spawn(tag, "paths", j, _time_key(t), attempt)


def sample_horizon_environment(seed: SeedLike, tag: str, j: int, t: float, d: int = 1) -> Environment:
    return sample_environment(Window.for_horizon(t, d), env_stream(seed, tag, j, t))


def _escalating(run_once, config: SmcConfig):
    """Call ``run_once(config, attempt)`` with growing particle budgets until it
    reports no extinction.  Returns ``(result, censored)``."""
    result = None
    for attempt in range(MAX_ESCALATIONS + 1):
        result = run_once(config.scaled(ESCALATION_FACTOR**attempt), attempt)
        if not result[1]:
            return result[0], False
    return result[0], True


def _env_log_z(args) -> tuple:
    beta, t, j, config, seed, tag, modified, truncate, d = args
    env = sample_horizon_environment(seed, tag, j, t, d)

    def once(cfg, attempt):
        est = estimate_Z_smc(
            env, beta, t, modified, cfg, path_stream(seed, tag, j, t, attempt), truncate=truncate
        )
        return est.log_value, est.extinct

    return _escalating(once, config)


def free_energy_curve(
    beta: float,
    t_grid: Sequence[float],
    n_env: int,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
    *,
    modified: bool = True,
    truncate: bool = True,
    tag: str = "free-energy",
    d: int = 1,
    workers: Optional[int] = None,
    start_env: int = 0,
) -> list:
    """Average of log(Z-hat) over ``n_env`` fresh environments for each t.

    Environments and particle streams depend on (seed, tag, env index, t)
    only, so curves for different beta share their randomness, and runs over
    disjoint index ranges (``start_env``) can be pooled.
    """
    beta = _check_beta(beta)
    if n_env < 1:
        raise ValueError("n_env must be >= 1")
    stream = as_stream(seed)
    points = []
    for t in t_grid:
        t = float(t)
        jobs = [
            (beta, t, j, config, stream, tag, modified, truncate, d)
            for j in range(start_env, start_env + n_env)
        ]
        results = ordered_map(_env_log_z, jobs, workers)
        logs = np.array([v for v, cens in results if not cens])
        censored = sum(1 for _, cens in results if cens)
        if censored > CENSOR_LIMIT * n_env or len(logs) == 0:
            raise ParticleBudgetError(
                f"particle budget insufficient: {censored} of {n_env} environments censored at t={t}"
            )
        se = float(np.std(logs, ddof=1) / math.sqrt(len(logs))) if len(logs) > 1 else 0.0
        a_hat = Estimate(
            float(logs.mean()), se, len(logs), stream.master, f"{tag}/t={t:g}", censored=censored
        )
        points.append(FreeEnergyPoint(beta, t, a_hat, len(logs), logs, censored))
    return points


@dataclass
class Extrapolation:
    p_hat: float
    interval: tuple
    slope: float
    stderr: float
    chi2: float

    def __iter__(self):
        yield self.p_hat
        yield self.interval


def extrapolate_p(points: Sequence[FreeEnergyPoint], z: float = 1.96) -> Extrapolation:
    """Weighted least-squares fit of a(t)/t = p + c t^{-1/2}."""
    if len(points) < 3:
        raise ValueError("degenerate design: need at least 3 points")
    t = np.array([p.t for p in points], dtype=float)
    if np.any(np.diff(t) <= 0) or np.any(t <= 0):
        raise ValueError("degenerate design: t must be positive and strictly increasing")
    y = np.array([p.a_hat.value for p in points], dtype=float) / t
    se = np.array([p.a_hat.stderr for p in points], dtype=float) / t
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite free-energy estimate")
    X = np.column_stack([np.ones_like(t), t**-0.5])
    weighted = bool(np.all(se > 0) and np.all(np.isfinite(se)))
    w = 1.0 / se**2 if weighted else np.ones_like(t)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    dof = len(t) - 2
    chi2 = float(np.sum(w * resid**2))
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    scale = max(1.0, chi2 / dof) if weighted else chi2 / dof
    p_se = math.sqrt(cov[0, 0] * scale)
    p_hat = float(coef[0])
    return Extrapolation(p_hat, (p_hat - z * p_se, p_hat + z * p_se), float(coef[1]), p_se, chi2)


@dataclass
class SuperadditivityReport:
    beta: float
    s: float
    t: float
    a_s: Estimate
    a_t: Estimate
    a_sum: Estimate
    slack: float
    stderr: float
    bound: float
    holds: bool


def superadditivity_check(
    beta: float,
    s: float,
    t: float,
    n_env: int,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
    delta: float = 0.45,
    *,
    workers: Optional[int] = None,
) -> SuperadditivityReport:
    """Slack a(s+t) - a(s) - a(t) from three independent sets of environments,
    compared with -(s+t)^delta."""
    if s < 2 or t < 2:
        raise ValueError("s and t must be >= 2")
    ests = []
    for role, horizon in (("s", s), ("t", t), ("s+t", s + t)):
        (pt,) = free_energy_curve(
            beta, [horizon], n_env, config, seed, tag=f"superadditivity/{role}", workers=workers
        )
        ests.append(pt.a_hat)
    a_s, a_t, a_sum = ests
    slack = a_sum.value - a_s.value - a_t.value
    se = math.sqrt(a_s.stderr**2 + a_t.stderr**2 + a_sum.stderr**2)
    bound = -((s + t) ** delta)
    return SuperadditivityReport(beta, s, t, a_s, a_t, a_sum, slack, se, bound, slack + 3 * se >= bound)


def stripe_removal_gap(
    env: Environment,
    beta: float,
    t: float,
    r: float,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
) -> tuple:
    """|log Z(w) - log Z(w without the stripe [r, r+1])| for one environment,
    both runs sharing their particle streams.  Returns ``(gap, censored)``."""
    cut = restrict(env, stripe_complement(r, r + 1))
    if len(cut) == len(env):
        return 0.0, False
    base = as_stream(seed)

    def once(cfg, attempt):
        ps = base.spawn("attempt", attempt)
        full = estimate_Z_smc(env, beta, t, True, cfg, ps, truncate=True)
        part = estimate_Z_smc(cut, beta, t, True, cfg, ps, truncate=True)
        if full.extinct or part.extinct:
            return math.nan, True
        return abs(full.log_value - part.log_value), False

    return _escalating(once, config)


def _stripe_pair(args) -> tuple:
    beta, t, r, j, config, seed, tag = args
    env = sample_horizon_environment(seed, tag, j, t)
    return stripe_removal_gap(env, beta, t, r, config, path_stream(seed, tag, j, t, 0))


def stripe_influence(
    beta: float,
    t: float,
    r: int,
    n_env: int,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
    *,
    workers: Optional[int] = None,
) -> Estimate:
    """Mean of |log Z(w) - log Z(w without the stripe [r, r+1])| over
    environments, both runs sharing their particle streams."""
    beta = _check_beta(beta)
    if not 1 <= r <= t - 1:
        raise ValueError("stripe index must satisfy 1 <= r <= t - 1")
    tag = "stripe-influence"
    stream = as_stream(seed)
    jobs = [(beta, float(t), float(r), j, config, stream, tag) for j in range(n_env)]
    results = ordered_map(_stripe_pair, jobs, workers)
    vals = np.array([v for v, cens in results if not cens])
    censored = n_env - len(vals)
    if censored > CENSOR_LIMIT * n_env or len(vals) == 0:
        raise ParticleBudgetError(f"particle budget insufficient: {censored} of {n_env} censored")
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return Estimate(float(vals.mean()), se, len(vals), stream.master, f"{tag}/t={t:g}/r={r}", censored=censored)


# --- first-disaster mechanism -------------------------------------------------------


@dataclass
class FirstDisasterReport:
    rate: float
    horizon: float
    m_grid: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    exact: np.ndarray
    modified_means: np.ndarray
    modified_exact: float
    slope: float
    modified_ratio: float


def truncated_inverse_mean(lam: float, t: float, m: float) -> float:
    """E[min(1/F, M); F < t] for F ~ Exp(lam)."""
    return m * -math.expm1(-lam / m) + lam * (exp1(lam / m) - exp1(lam * t))


def first_disaster_mechanism(
    m_grid: Sequence[float], n_samples: int, seed: SeedLike = 0, t: float = 4.0, d: int = 1
) -> FirstDisasterReport:
    """Truncated means of 1/F, F the first disaster time in [0, t] x (1/2)U(0).

    The disasters inside the half-size ball form a Poisson process of rate
    2^-d in time.  The modified variant only looks at disasters after time 1.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    if np.any(m_grid < math.e):
        raise ValueError("M values must be >= e")
    lam = 2.0**-d
    rng = as_stream(seed).spawn("first-disaster").generator()
    count = rng.poisson(lam * t, size=n_samples)
    u = rng.random(n_samples)
    with np.errstate(divide="ignore"):
        first = np.where(count > 0, t * -np.expm1(np.log(u) / np.maximum(count, 1)), np.inf)
    count1 = rng.poisson(lam * (t - 1.0), size=n_samples)
    u1 = rng.random(n_samples)
    with np.errstate(divide="ignore"):
        first1 = np.where(count1 > 0, 1.0 + (t - 1.0) * -np.expm1(np.log(u1) / np.maximum(count1, 1)), np.inf)
    means, ses, mod = [], [], []
    for m in m_grid:
        with np.errstate(divide="ignore"):
            v = np.where(first < t, np.minimum(1.0 / first, m), 0.0)
            v1 = np.where(first1 < t, np.minimum(1.0 / first1, m), 0.0)
        means.append(v.mean())
        ses.append(v.std(ddof=1) / math.sqrt(n_samples))
        mod.append(v1.mean())
    means, ses, mod = np.array(means), np.array(ses), np.array(mod)
    exact = np.array([truncated_inverse_mean(lam, t, m) for m in m_grid])
    mod_exact = lam * math.exp(lam) * (exp1(lam) - exp1(lam * t))
    slope = float(np.polyfit(np.log(m_grid), means, 1)[0]) if len(m_grid) > 1 else math.nan
    return FirstDisasterReport(
        lam, t, m_grid, means, ses, exact, mod, float(mod_exact), slope, float(mod[-1] / mod[0])
    )


# --- concentration ------------------------------------------------------------------


@dataclass
class ConcentrationReport:
    beta: float
    t_grid: np.ndarray
    sd: np.ndarray
    sd_ci: np.ndarray
    slope: float
    n_env: int


def concentration_from_points(points: Sequence[FreeEnergyPoint], seed: SeedLike = 0, n_boot: int = 1000) -> ConcentrationReport:
    rng = as_stream(seed).spawn("bootstrap").generator()
    t = np.array([p.t for p in points])
    sd, ci = [], []
    for p in points:
        x = p.log_estimates
        sd.append(float(np.std(x, ddof=1)))
        idx = rng.integers(0, len(x), size=(n_boot, len(x)))
        boot = np.std(x[idx], axis=1, ddof=1)
        ci.append(np.quantile(boot, [0.025, 0.975]))
    sd = np.array(sd)
    if np.all(sd > 0) and len(t) > 1:
        slope = float(np.polyfit(np.log(t), np.log(sd), 1)[0])
    else:
        slope = math.nan
    return ConcentrationReport(points[0].beta, t, sd, np.array(ci), slope, min(p.n_env for p in points))


def concentration_scan(
    beta: float,
    t_grid: Sequence[float],
    n_env: int,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
    *,
    workers: Optional[int] = None,
) -> ConcentrationReport:
    """Standard deviation of log(Z-hat) across environments and its growth
    exponent in t."""
    if n_env < 50:
        raise ValueError("n_env must be >= 50")
    points = free_energy_curve(beta, t_grid, n_env, config, seed, workers=workers)
    return concentration_from_points(points, seed)
