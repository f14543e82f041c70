"""Exact survival of Brownian paths among disasters.

A path only interacts with a disaster ``(s, x)`` through its position at time
``s`` (``x`` lies in the unit ball around ``B(s)`` iff ``B(s)`` lies in the unit
ball around ``x``).  Paths are therefore simulated exactly on a *skeleton*: the
disaster times below the horizon plus the integer checkpoints.  Excursions
between skeleton times only matter for the truncation event, which is decided
with Brownian-bridge crossing probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import ndtr

from .environment import Environment, ball_radius
from .streams import SeedLike, as_stream

INF = math.inf


def truncation_radius(t: float) -> float:
    return float(math.ceil(t) ** 2)


def kill_factor(beta: float) -> float:
    """Survival factor of a single hit, ``exp(-beta)`` (0 at beta = inf)."""
    if beta < 0 or math.isnan(beta):
        raise ValueError("beta must be >= 0")
    return 0.0 if math.isinf(beta) else math.exp(-beta)


# --- Brownian bridge boundary crossing ------------------------------------------


def one_sided_crossing(gap0, gap1, h):
    """P(a bridge started ``gap0`` below a level and ending ``gap1`` below it
    touches the level within time ``h``) = exp(-2 gap0 gap1 / h)."""
    gap0 = np.asarray(gap0, dtype=float)
    gap1 = np.asarray(gap1, dtype=float)
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p = np.exp(-2.0 * np.maximum(gap0, 0.0) * np.maximum(gap1, 0.0) / h)
    p = np.where((gap0 <= 0) | (gap1 <= 0), 1.0, p)
    return np.where(h > 0, p, np.where((gap0 <= 0) | (gap1 <= 0), 1.0, 0.0))


def log_strip_stay(a, b, h, lo, hi):
    """log P(a Brownian bridge from ``a`` to ``b`` over time ``h`` stays in the
    strip ``(lo, hi)``).

    Short bridges use the method of images, long ones the eigenfunction
    expansion of the killed heat kernel divided by the free one; both series
    are truncated far beyond double precision.
    """
    a, b, h = np.broadcast_arrays(
        np.asarray(a, dtype=float) - lo, np.asarray(b, dtype=float) - lo, np.asarray(h, dtype=float)
    )
    w = float(hi - lo)
    out = np.full(a.shape, -np.inf)
    inside = (a > 0) & (a < w) & (b > 0) & (b < w)
    zero = inside & (h <= 0)
    out[zero] = 0.0
    short = inside & (h > 0) & (h <= 0.5 * w * w)
    long_ = inside & (h > 0.5 * w * w)
    if short.any():
        aa, bb, hh = a[short], b[short], h[short]
        total = np.zeros(aa.shape)
        for k in range(-6, 7):
            kw = k * w
            total += np.exp(-2.0 * kw * (kw + bb - aa) / hh) - np.exp(-2.0 * (aa + kw) * (bb + kw) / hh)
        with np.errstate(divide="ignore"):
            out[short] = np.log(np.clip(total, 0.0, 1.0))
    if long_.any():
        aa, bb, hh = a[long_], b[long_], h[long_]
        lam1 = (np.pi / w) ** 2 / 2.0
        series = np.zeros(aa.shape)
        for n in range(1, 40):
            series += (
                np.sin(n * np.pi * aa / w)
                * np.sin(n * np.pi * bb / w)
                * np.exp(-(n * n - 1) * lam1 * hh)
            )
        log_free = -((bb - aa) ** 2) / (2.0 * hh) - 0.5 * np.log(2.0 * np.pi * hh)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[long_] = np.log(2.0 / w) + np.log(np.maximum(series, 0.0)) - lam1 * hh - log_free
        out[long_] = np.minimum(out[long_], 0.0)
    return out


def strip_stay_probability(a, b, h, lo, hi):
    """P(a Brownian bridge from ``a`` to ``b`` over time ``h`` stays in the
    open strip ``(lo, hi)``)."""
    return np.exp(log_strip_stay(a, b, h, lo, hi))


# --- domain types -------------------------------------------------------------


@dataclass
class PathSkeleton:
    times: np.ndarray
    values: np.ndarray
    start: np.ndarray
    truncation_ok: Optional[bool] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.start = np.atleast_1d(np.asarray(self.start, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.times), -1)
        if self.times[0] != 0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("skeleton times must start at 0 and increase strictly")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def value_at(self, s: float) -> np.ndarray:
        k = np.searchsorted(self.times, s)
        if k == len(self.times) or self.times[k] != s:
            raise KeyError(f"time {s} is not on the skeleton")
        return self.values[k]


@dataclass(frozen=True)
class DeathClock:
    beta: float
    xi: float = 1.0
    modified: bool = False

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not math.isinf(self.beta) and not self.xi > 0:
            raise ValueError("xi must be positive")

    @classmethod
    def sample(cls, beta: float, seed: SeedLike, modified: bool = False) -> "DeathClock":
        xi = float(as_stream(seed).generator().exponential(1.0))
        return cls(beta, xi, modified)


@dataclass(frozen=True)
class SurvivalVerdict:
    hit_count: int
    weight: float
    death_time: float
    truncation_ok: bool


# --- skeleton sampling ----------------------------------------------------------


def skeleton_times(env: Environment, t: float) -> np.ndarray:
    if t > env.window.t_max:
        raise ValueError("window too small")
    checkpoints = np.arange(0.0, math.floor(t) + 1.0)
    dt = env.times[env.times < t]
    return np.unique(np.concatenate([checkpoints, dt, [float(t)]]))


def sample_paths(times: np.ndarray, start, n: int, rng: np.random.Generator) -> np.ndarray:
    """Brownian values at ``times`` (starting at ``times[0] = 0``) for ``n``
    independent paths; shape ``(n, len(times), d)``."""
    start = np.atleast_1d(np.asarray(start, dtype=float))
    d = start.shape[0]
    gaps = np.diff(times)
    steps = rng.standard_normal((n, len(gaps), d)) * np.sqrt(gaps)[None, :, None]
    values = np.empty((n, len(times), d))
    values[:, 0, :] = start
    np.cumsum(steps, axis=1, out=values[:, 1:, :])
    values[:, 1:, :] += start
    return values


def sample_skeleton(env: Environment, t: float, start=None, seed: SeedLike = 0) -> PathSkeleton:
    if start is None:
        start = np.zeros(env.dimension)
    times = skeleton_times(env, t)
    values = sample_paths(times, start, 1, as_stream(seed).generator())[0]
    return PathSkeleton(times, values, np.atleast_1d(np.asarray(start, dtype=float)))


# --- hits and death times -------------------------------------------------------


def _relevant(env: Environment, t: float, modified: bool) -> np.ndarray:
    mask = env.times < t
    if modified:
        mask &= env.times >= 1.0
    return np.flatnonzero(mask)


def hit_matrix(times, values, env: Environment, t: float, modified: bool) -> tuple:
    """Boolean ``(n, k)`` hit matrix for ``n`` paths sharing ``times`` against
    the ``k`` relevant disasters, plus those disasters' times."""
    idx = _relevant(env, t, modified)
    pos = np.searchsorted(times, env.times[idx])
    if np.any(pos >= len(times)) or np.any(times[np.minimum(pos, len(times) - 1)] != env.times[idx]):
        raise ValueError("skeleton does not cover the disaster times of the environment")
    r = ball_radius(env.dimension)
    diff = values[:, pos, :] - env.positions[idx][None, :, :]
    hits = np.einsum("nkd,nkd->nk", diff, diff) <= r * r
    return hits, env.times[idx]


def evaluate(skeleton: PathSkeleton, env: Environment, clock: DeathClock, t: float) -> SurvivalVerdict:
    hits, htimes = hit_matrix(skeleton.times, skeleton.values[None], env, t, clock.modified)
    hits = hits[0]
    n_hits = int(hits.sum())
    factor = kill_factor(clock.beta)
    if math.isinf(clock.beta):
        weight = 1.0 if n_hits == 0 else 0.0
        fired = np.flatnonzero(hits)
    else:
        weight = factor**n_hits
        cum = np.cumsum(hits) * clock.beta
        fired = np.flatnonzero(hits & (cum >= clock.xi))
    death = float(htimes[fired[0]]) if len(fired) else INF
    if skeleton.truncation_ok is None:
        dev = skeleton.values - skeleton.start
        ok = bool(np.all(np.sqrt(np.einsum("kd,kd->k", dev, dev)) <= truncation_radius(t)))
    else:
        ok = bool(skeleton.truncation_ok)
    return SurvivalVerdict(n_hits, weight, death, ok)


# --- truncation event -----------------------------------------------------------


def truncation_mask(times, values, start, t: float, rng: np.random.Generator) -> np.ndarray:
    """Per-path verdict of the truncation event for paths of shape (n, m, d):
    skeleton values inside the ball of radius ceil(t)^2 and no bridge excursion
    past +-ceil(t)^2 in any coordinate between consecutive skeleton times."""
    bound = truncation_radius(t)
    dev = values - np.asarray(start, dtype=float)
    ok = np.sqrt(np.einsum("nkd,nkd->nk", dev, dev)).max(axis=1) <= bound
    h = np.diff(times)[None, :, None]
    up = one_sided_crossing(bound - dev[:, :-1], bound - dev[:, 1:], h)
    down = one_sided_crossing(bound + dev[:, :-1], bound + dev[:, 1:], h)
    u = rng.random(up.shape + (2,))
    crossed = (u[..., 0] < up) | (u[..., 1] < down)
    return ok & ~crossed.any(axis=(1, 2))


def check_truncation(skeleton: PathSkeleton, t: float, seed: SeedLike) -> bool:
    ok = truncation_mask(
        skeleton.times, skeleton.values[None], skeleton.start, t, as_stream(seed).generator()
    )
    return bool(ok[0])


# --- independent oracle -----------------------------------------------------------


def oracle_survival_quadrature(
    env: Environment, beta: float, t: float, modified: bool = False, step: float = 0.0025
) -> float:
    """Z_t for d = 1 by propagating the killed density on a grid.

    Between disaster times the density is convolved with the exact
    cell-integrated Gaussian kernel; at each disaster time it is multiplied by
    the survival factor, using the exact fraction of every grid cell covered by
    the kill interval.
    """
    if env.dimension != 1:
        raise ValueError("oracle scale exceeded")
    idx = _relevant(env, t, modified)
    if len(idx) > 6:
        raise ValueError("oracle scale exceeded")
    if step > 0.005:
        raise ValueError("grid step must be <= 0.005")
    factor = kill_factor(beta)
    if len(idx) == 0 or factor == 1.0:
        return 1.0
    r = ball_radius(1)
    half = 10.0 * math.sqrt(t)
    n = int(math.ceil(half / step))
    x = np.arange(-n, n + 1) * step
    lo_edge, hi_edge = x - step / 2, x + step / 2

    def kernel(var):
        sd = math.sqrt(var)
        m = min(int(math.ceil(10 * sd / step)) + 1, 2 * n)
        j = np.arange(-m, m + 1) * step
        return ndtr((j + step / 2) / sd) - ndtr((j - step / 2) / sd)

    mass = None
    prev = 0.0
    for s, xc in zip(env.times[idx], env.positions[idx, 0]):
        gap = s - prev
        if mass is None:
            mass = ndtr(hi_edge / math.sqrt(s)) - ndtr(lo_edge / math.sqrt(s))
        elif gap > 0:
            mass = fftconvolve(mass, kernel(gap), mode="same")
            mass = np.maximum(mass, 0.0)
        prev = s
        cover = np.clip(np.minimum(hi_edge, xc + r) - np.maximum(lo_edge, xc - r), 0.0, step) / step
        mass = mass * (1.0 - cover * (1.0 - factor))
    return float(mass.sum())
