"""Dispersion of two-point measures and the sampled midpoint measure.

For a measure nu on the plane, ``M^p(nu)`` is the largest mass that p + 1
boxes ``J5_x(i) x J5_y(i)``, i = 0..p, can hold simultaneously, where
``J5_x(i) = x + 7 i + [-5/2, 5/2]``; the sup runs over the offsets (x, y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .environment import Environment, restrict, stripe_complement
from .estimators import (
    CENSOR_LIMIT,
    ParticleBudgetError,
    _escalating,
    path_stream,
    sample_horizon_environment,
)
from .parallel import ordered_map
from .smc import SmcConfig, run_particles
from .streams import SeedLike, as_stream

HALF = 2.5
SPACING = 7.0


@dataclass
class EmpiricalMeasure2D:
    points: np.ndarray
    weights: np.ndarray
    ancestral_ess: float = math.nan

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(self.points):
            raise ValueError("one weight per point")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and >= 0")
        total = w.sum()
        if len(w) and total <= 0:
            raise ValueError("total weight must be positive")
        self.weights = w / total if len(w) else w

    def __len__(self) -> int:
        return len(self.weights)

    def to_csv(self) -> str:
        rows = ["x,y,w"] + [f"{x!r},{y!r},{w!r}" for (x, y), w in zip(self.points.tolist(), self.weights.tolist())]
        return "\n".join(rows) + "\n"


@dataclass
class DispersionReport:
    p: int
    value: float
    offset: tuple
    grid_step: float
    boundary_mass: float


def _axis(coord: np.ndarray, p: int, step: float) -> np.ndarray:
    lo = math.floor((coord.min() - SPACING * p - HALF) / step) - 1
    hi = math.ceil((coord.max() + HALF) / step) + 1
    return np.arange(lo, hi + 1) * step


def _indicator(coord: np.ndarray, grid: np.ndarray, shift: float) -> np.ndarray:
    c = grid[:, None] + shift
    return (np.abs(coord[None, :] - c) <= HALF).astype(float)


def dispersion(measure: EmpiricalMeasure2D, p: int, grid_step: float = 0.5) -> DispersionReport:
    """Grid evaluation of M^p; offsets are multiples of ``grid_step``.

    The grid value can miss the true sup only through mass within
    ``grid_step`` of a box edge at the maximizing offset, which is reported.
    """
    if len(measure) == 0:
        raise ValueError("empty measure")
    if p < 0:
        raise ValueError("p must be >= 0")
    if not 0 < grid_step <= 0.5:
        raise ValueError("grid_step must lie in (0, 1/2]")
    x, y, w = measure.points[:, 0], measure.points[:, 1], measure.weights
    gx, gy = _axis(x, p, grid_step), _axis(y, p, grid_step)
    best = None
    for i in range(p + 1):
        ax = _indicator(x, gx, SPACING * i)
        ay = _indicator(y, gy, SPACING * i)
        mass = (ax * w) @ ay.T
        best = mass if best is None else np.minimum(best, mass)
    k = np.unravel_index(np.argmax(best), best.shape)
    ox, oy = float(gx[k[0]]), float(gy[k[1]])
    shell = 0.0
    for i in range(p + 1):
        cx, cy = ox + SPACING * i, oy + SPACING * i
        near = (np.abs(np.abs(x - cx) - HALF) <= grid_step) & (np.abs(y - cy) <= HALF + grid_step)
        near |= (np.abs(np.abs(y - cy) - HALF) <= grid_step) & (np.abs(x - cx) <= HALF + grid_step)
        shell = max(shell, float(w[near].sum()))
    return DispersionReport(p, float(min(max(best[k], 0.0), 1.0)), (ox, oy), grid_step, shell)


# --- the midpoint measure ------------------------------------------------------------


def ancestral_ess(values: np.ndarray, weights: np.ndarray) -> float:
    """Effective number of distinct ancestors: weights pooled over identical
    recorded values, then 1 / sum(W^2)."""
    _, inverse = np.unique(values, axis=0, return_inverse=True)
    pooled = np.bincount(inverse.reshape(-1), weights=weights)
    pooled = pooled / pooled.sum()
    return float(1.0 / np.sum(pooled**2))


def sample_midpoint_measure(
    env: Environment,
    beta: float,
    r: float,
    s: float,
    t: float,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
) -> tuple:
    """Law of (B(r), B(s)) for the path conditioned to survive the
    disasters outside [r, s] up to t (first unit of time ignored, truncation
    on).  Returns ``(measure, extinct)``; islands are pooled with equal
    weight."""
    if not 1 <= r <= s <= t:
        raise ValueError("need 1 <= r <= s <= t")
    stream = as_stream(seed).spawn("midpoint")
    kept = restrict(env, stripe_complement(r, s))
    run = run_particles(kept, beta, t, config, stream, modified=True, truncate=True, record_times=(r, s))
    n = config.per_island
    br, bs = run.records[float(r)][:, 0], run.records[float(s)][:, 0]
    weights = np.zeros(len(br))
    for isl in range(config.n_islands):
        sl = slice(isl * n, (isl + 1) * n)
        lw = run.log_weights[sl]
        if run.extinct[isl] or not np.isfinite(lw).any():
            continue
        w = np.exp(lw - lw.max())
        weights[sl] = w / w.sum()
    extinct = bool(run.extinct.any())
    keep = weights > 0
    if not keep.any():
        return EmpiricalMeasure2D(np.zeros((0, 2)), np.zeros(0)), True
    pts = np.column_stack([br[keep], bs[keep]])
    ess = ancestral_ess(pts[:, :1], weights[keep] / weights[keep].sum())
    return EmpiricalMeasure2D(pts, weights[keep], ess), extinct


@dataclass
class DispersionScan:
    beta: float
    t_grid: np.ndarray
    p_values: tuple
    m_values: dict
    mean_abs_log: dict
    zero_counts: dict
    floor_products: np.ndarray
    threshold: float
    floor_exponent: float
    ancestral_ess: np.ndarray
    censored: int


def pigeonhole_floor(t: float) -> float:
    """Lower bound on M^0 for any measure on the square of side 2 ceil(t)^2:
    such a square is covered by at most (2 ceil(t)^2 + 1)^2 grid-aligned
    boxes of side 5."""
    return 1.0 / (2 * math.ceil(t) ** 2 + 1) ** 2


def floor_threshold(t_grid: Sequence[float]) -> float:
    """Constant c with M^0 >= c t^-4 guaranteed by the pigeonhole bound."""
    return min(t**4 * pigeonhole_floor(t) for t in t_grid)


def _scan_env(args):
    beta, t, j, config, seed, tag, p_values, step = args
    env = sample_horizon_environment(seed, tag, j, t)
    half = t / 2

    def once(cfg, attempt):
        nu, extinct = sample_midpoint_measure(env, beta, half, half, t, cfg, path_stream(seed, tag, j, t, attempt))
        return nu, extinct

    nu, censored = _escalating(once, config)
    if censored:
        return None
    return [dispersion(nu, p, step).value for p in p_values], nu.ancestral_ess


def dispersion_scan(
    beta: float,
    t_grid: Sequence[float],
    n_env: int,
    config: SmcConfig = SmcConfig(),
    seed: SeedLike = 0,
    *,
    p_values: tuple = (0, 2),
    grid_step: float = 0.5,
    workers: Optional[int] = None,
) -> DispersionScan:
    """M^p of the midpoint measure at r = s = t/2 over environments."""
    tag = "dispersion"
    stream = as_stream(seed)
    t_grid = np.asarray(t_grid, dtype=float)
    m_values = {p: [] for p in p_values}
    ess_all, censored = [], 0
    for t in t_grid:
        jobs = [(beta, float(t), j, config, stream, tag, p_values, grid_step) for j in range(n_env)]
        res = ordered_map(_scan_env, jobs, workers)
        ok = [r for r in res if r is not None]
        censored += len(res) - len(ok)
        if len(res) - len(ok) > CENSOR_LIMIT * n_env:
            raise ParticleBudgetError(f"particle budget insufficient at t={t:g}")
        for k, p in enumerate(p_values):
            m_values[p].append(np.array([r[0][k] for r in ok]))
        ess_all.append(np.array([r[1] for r in ok]))
    mean_abs_log, zeros = {}, {}
    for p in p_values:
        with np.errstate(divide="ignore"):
            mean_abs_log[p] = np.array([np.mean(np.abs(np.log(v))) for v in m_values[p]])
        zeros[p] = np.array([int(np.sum(v == 0)) for v in m_values[p]])
    floors = np.array([float(np.min(v)) * t**4 for v, t in zip(m_values[p_values[0]], t_grid)])
    mins = np.array([float(np.min(v)) for v in m_values[p_values[0]]])
    if len(t_grid) > 1 and np.all(mins > 0):
        exponent = float(np.polyfit(np.log(t_grid), np.log(mins), 1)[0])
    else:
        exponent = math.nan
    return DispersionScan(
        float(beta), t_grid, tuple(p_values), m_values, mean_abs_log, zeros, floors,
        floor_threshold(t_grid), exponent, np.array([np.mean(e) for e in ess_all]), censored,
    )
