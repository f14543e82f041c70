"""Slab-wise particle engine for survival probabilities.

Particles are Brownian paths advanced one time slab at a time.  Inside a slab
a particle only looks at disasters within ``reach`` of its slab-start position
(per coordinate); the chance that a Brownian path travels farther than that
in one unit of time is below 1e-12.  Survival weights are multiplied in, and
when the effective sample size drops below a threshold the population is
resampled systematically and the mean weight is folded into the running
log-estimate.  The product of those means is an unbiased estimator of the
survival probability.

Random numbers are drawn from a separate stream per (island, slab), as a block
of shape ``(K, n, d)``: particle ``i`` uses rows ``0, 1, ...`` of column ``i``
for its successive Gaussian steps.  The value at ``(j, i, c)`` does not depend
on ``K``, so runs that differ only in ``beta`` share their noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .environment import Environment, ball_radius
from .path_survival import truncation_radius
from .streams import Stream

BRIDGE_MARGIN = 10.0


@dataclass(frozen=True)
class SmcConfig:
    """Particle budget and resampling policy.

    ``n_particles`` is the total budget, split evenly across ``n_islands``
    independent populations whose estimates give the standard error.
    """

    n_particles: int = 10_000
    slab_length: float = 1.0
    ess_threshold: float = 0.5
    resampling: str = "systematic"
    n_islands: int = 8
    reach: float = 8.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not 0 < self.ess_threshold <= 1:
            raise ValueError("ess_threshold must lie in (0, 1]")
        if not self.slab_length > 0:
            raise ValueError("slab_length must be > 0")
        if self.resampling != "systematic":
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")
        if self.n_islands < 1 or self.n_particles // self.n_islands < 2:
            raise ValueError("each island needs at least 2 particles")
        if not self.reach > 1:
            raise ValueError("reach must exceed 1")

    @property
    def per_island(self) -> int:
        return self.n_particles // self.n_islands

    def scaled(self, factor: int) -> "SmcConfig":
        return SmcConfig(
            self.n_particles * factor,
            self.slab_length,
            self.ess_threshold,
            self.resampling,
            self.n_islands,
            self.reach,
        )


# --- numba kernels ----------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _candidate_range(xs, x, reach):
    lo = np.searchsorted(xs, x - reach, side="left")
    hi = np.searchsorted(xs, x + reach, side="right")
    return lo, hi


@numba.njit(cache=True, nogil=True)
def _count_candidates(pos, alive, xs, order, dpos, reach):
    n, d = pos.shape
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if not alive[i]:
            continue
        lo, hi = _candidate_range(xs, pos[i, 0], reach)
        if d == 1:
            out[i] = hi - lo
            continue
        c = 0
        for q in range(lo, hi):
            j = order[q]
            ok = True
            for k in range(1, d):
                if abs(dpos[j, k] - pos[i, k]) > reach:
                    ok = False
                    break
            if ok:
                c += 1
        out[i] = c
    return out


@numba.njit(cache=True, nogil=True)
def _crossing(dev0, dev1, h, bound):
    """Probability that a bridge between two points inside the box
    [-bound, bound]^d leaves it, combined over sides and coordinates."""
    stay = 1.0
    for c in range(dev0.shape[0]):
        a0 = bound - dev0[c]
        a1 = bound - dev1[c]
        stay *= 1.0 - math.exp(-2.0 * a0 * a1 / h)
        b0 = bound + dev0[c]
        b1 = bound + dev1[c]
        stay *= 1.0 - math.exp(-2.0 * b0 * b1 / h)
    return 1.0 - stay


@numba.njit(cache=True, nogil=True)
def _propagate(
    pos, start, logw, alive, a, b, dtimes, dpos, xs, order, reach, radius,
    beta, kill_all, normals, uniforms, truncate, bound,
):
    """Advance every live particle from time ``a`` to ``b``.  Updates ``pos``,
    ``logw`` and ``alive`` in place."""
    n, d = pos.shape
    cand = np.empty(xs.shape[0], dtype=np.int64)
    cur = np.empty(d)
    nxt = np.empty(d)
    use_bridge = truncate and uniforms.shape[0] > 0
    r2 = radius * radius
    for i in range(n):
        if not alive[i]:
            continue
        lo, hi = _candidate_range(xs, pos[i, 0], reach)
        m = 0
        for q in range(lo, hi):
            j = order[q]
            ok = True
            for k in range(1, d):
                if abs(dpos[j, k] - pos[i, k]) > reach:
                    ok = False
                    break
            if ok:
                cand[m] = j
                m += 1
        # slab-local indices are in time order
        cs = np.sort(cand[:m])
        for k in range(d):
            cur[k] = pos[i, k]
        now = a
        row = 0
        hits = 0
        dead = False
        for q in range(m + 1):
            if q < m:
                j = cs[q]
                target = dtimes[j]
            else:
                j = -1
                target = b
            h = target - now
            if h > 0:
                sq = math.sqrt(h)
                out = False
                for k in range(d):
                    nxt[k] = cur[k] + sq * normals[row, i, k]
                if truncate:
                    norm2 = 0.0
                    for k in range(d):
                        dv = nxt[k] - start[k]
                        norm2 += dv * dv
                    if norm2 > bound * bound:
                        out = True
                    elif use_bridge:
                        p = _crossing(cur - start, nxt - start, h, bound)
                        if uniforms[row, i] < p:
                            out = True
                row += 1
                for k in range(d):
                    cur[k] = nxt[k]
                now = target
                if out:
                    dead = True
                    break
            if j >= 0:
                dist2 = 0.0
                for k in range(d):
                    dv = cur[k] - dpos[j, k]
                    dist2 += dv * dv
                if dist2 <= r2:
                    hits += 1
                    if kill_all:
                        dead = True
                        break
        if dead:
            alive[i] = False
            logw[i] = -np.inf
            continue
        for k in range(d):
            pos[i, k] = cur[k]
        logw[i] -= beta * hits


# --- helpers ------------------------------------------------------------------------


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Indices drawn by systematic resampling with offset ``u`` in [0, 1)."""
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    points = (u + np.arange(n)) / n
    idx = np.searchsorted(cdf, points, side="right")
    return np.minimum(idx, n - 1)


def ess_fraction(logw: np.ndarray) -> float:
    m = logw.max()
    if not np.isfinite(m):
        return 0.0
    w = np.exp(logw - m)
    return float(w.sum() ** 2 / (w @ w) / len(w))


def _logmeanexp(logw: np.ndarray) -> float:
    m = logw.max()
    if not np.isfinite(m):
        return -math.inf
    return float(m + math.log(np.mean(np.exp(logw - m))))


def slab_edges(t: float, slab: float, extra=()) -> np.ndarray:
    n = int(math.floor(t / slab + 1e-12))
    edges = [k * slab for k in range(n + 1)]
    edges += [float(v) for v in extra]
    edges.append(float(t))
    edges = np.unique(np.asarray(edges, dtype=float))
    return edges[(edges >= 0) & (edges <= t)]


@dataclass
class IslandRun:
    log_z: np.ndarray
    extinct: np.ndarray
    n_resample: int
    positions: np.ndarray
    log_weights: np.ndarray
    records: dict = field(default_factory=dict)
    lineage: Optional[np.ndarray] = None


def run_particles(
    env: Environment,
    beta: float,
    t: float,
    config: SmcConfig,
    stream: Stream,
    *,
    modified: bool = False,
    truncate: bool = True,
    start=None,
    record_times=(),
) -> IslandRun:
    """Run ``config.n_islands`` independent particle populations.

    ``record_times`` are extra slab edges at which each particle's position is
    stored; stored values travel with the particle through resampling, so at
    the end they are the ancestral positions of the surviving lineages.
    """
    d = env.dimension
    if t > env.window.t_max + 1e-12:
        raise ValueError("window too small")
    if beta < 0 or math.isnan(beta):
        raise ValueError("beta must be >= 0")
    start = np.zeros(d) if start is None else np.atleast_1d(np.asarray(start, dtype=float))
    n_isl, n = config.n_islands, config.per_island
    total = n_isl * n
    kill_all = math.isinf(beta)
    beta_f = 0.0 if kill_all else float(beta)
    bound = truncation_radius(t)

    keep = env.times < t
    if modified:
        keep &= env.times >= 1.0
    dtimes_all = env.times[keep]
    dpos_all = env.positions[keep]

    pos = np.tile(start, (total, 1))
    logw = np.zeros(total)
    alive = np.ones(total, dtype=bool)
    log_z = np.zeros(n_isl)
    extinct = np.zeros(n_isl, dtype=bool)
    lineage = np.arange(total)
    records = {float(s): np.full((total, d), np.nan) for s in record_times}
    n_resample = 0
    edges = slab_edges(t, config.slab_length, record_times)

    for k in range(len(edges) - 1):
        a, b = float(edges[k]), float(edges[k + 1])
        lo = np.searchsorted(dtimes_all, a, side="left")
        hi = np.searchsorted(dtimes_all, b, side="left")
        dtimes = np.ascontiguousarray(dtimes_all[lo:hi])
        dpos = np.ascontiguousarray(dpos_all[lo:hi])
        order = np.argsort(dpos[:, 0], kind="stable") if len(dtimes) else np.zeros(0, np.int64)
        xs = np.ascontiguousarray(dpos[order, 0]) if len(dtimes) else np.zeros(0)
        counts = _count_candidates(pos, alive, xs, order, dpos, config.reach)
        rows = int(counts.max()) + 1 if total else 1
        slab_key = ("slab", k)
        normals = np.empty((rows, total, d))
        for isl in range(n_isl):
            g = stream.spawn("island", isl, *slab_key, "steps").generator()
            normals[:, isl * n : (isl + 1) * n, :] = g.standard_normal((rows, n, d))
        near = False
        if truncate:
            dev = np.abs(pos[alive] - start)
            near = dev.size > 0 and float(dev.max()) > bound - config.reach - BRIDGE_MARGIN
        if near:
            uniforms = np.empty((rows, total))
            for isl in range(n_isl):
                g = stream.spawn("island", isl, *slab_key, "bridge").generator()
                uniforms[:, isl * n : (isl + 1) * n] = g.random((rows, n))
        else:
            uniforms = np.zeros((0, total))
        _propagate(
            pos, start, logw, alive, a, b, dtimes, dpos, xs, order, config.reach,
            ball_radius(d), beta_f, kill_all, normals, uniforms, truncate, bound,
        )
        for s, arr in records.items():
            if s == b:
                arr[:] = pos
        last = k == len(edges) - 2
        for isl in range(n_isl):
            if extinct[isl]:
                continue
            sl = slice(isl * n, (isl + 1) * n)
            lw = logw[sl]
            if not alive[sl].any():
                extinct[isl] = True
                log_z[isl] = -math.inf
                continue
            if last:
                continue
            if ess_fraction(lw) < config.ess_threshold:
                log_z[isl] += _logmeanexp(lw)
                u = stream.spawn("island", isl, *slab_key, "resample").generator().random()
                w = np.exp(lw - lw.max())
                idx = systematic_resample(w, u) + isl * n
                pos[sl] = pos[idx]
                lineage[sl] = lineage[idx]
                for arr in records.values():
                    arr[sl] = arr[idx]
                logw[sl] = 0.0
                alive[sl] = True
                n_resample += 1
    for isl in range(n_isl):
        if not extinct[isl]:
            log_z[isl] += _logmeanexp(logw[isl * n : (isl + 1) * n])
    return IslandRun(log_z, extinct, n_resample, pos, logw, records, lineage)
