"""The constructive survival strategy in a tube of half-width 3 (d = 1).

Disasters inside J7 = [-7/2, 7/2] are listed in time order.  The five unit
bands J1_x = [x - 1/2, x + 1/2), x in {-2, ..., 2}, tile J5 = [-5/2, 5/2).  A
band is contaminated by a disaster when it meets the disaster's kill interval
[D - 1/2, D + 1/2]; a path sitting in an uncontaminated band at the disaster
time is not hit.  The strategy parks the path in a safe band at every
disaster time, and on the shortest interarrival before each renewal it stays
inside one band for the whole interval.

Probabilities of the strategy event and of plain tube survival are estimated
by guided sequential sampling: at each disaster time the path is drawn from
the Gaussian transition truncated to the allowed landing set, the weight picks
up the landing mass, and the exact probability that the bridge in between
stays in the allowed strip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import log_ndtr, logsumexp

from .environment import Disaster, Environment, ball_radius
from .path_survival import log_strip_stay
from .smc import ess_fraction, systematic_resample
from .streams import SeedLike, as_stream

SITES = (-2, -1, 0, 1, 2)
J5 = (-2.5, 2.5)
J6 = (-3.0, 3.0)
J7 = (-3.5, 3.5)
RATE = 7.0


@dataclass(frozen=True)
class Bands:
    sites: tuple = SITES
    j5: tuple = J5
    j6: tuple = J6
    j7: tuple = J7

    @staticmethod
    def unit(x: int) -> tuple:
        return (x - 0.5, x + 0.5)

    def covers_j5(self) -> bool:
        edges = sorted(self.unit(x) for x in self.sites)
        if edges[0][0] != self.j5[0] or edges[-1][1] != self.j5[1]:
            return False
        return all(a[1] == b[0] for a, b in zip(edges, edges[1:]))


# --- contamination and safe bands ---------------------------------------------------


def _position(disaster) -> float:
    if isinstance(disaster, Disaster):
        return float(disaster.position[0])
    return float(disaster)


def contaminated_intervals(disaster) -> tuple:
    """Sites x whose band [x - 1/2, x + 1/2) meets [D - 1/2, D + 1/2].

    That is D - 1 < x <= D + 1, so at most two sites qualify.
    """
    d = _position(disaster)
    if abs(d) > J7[1]:
        raise ValueError("disaster position outside J7 = [-7/2, 7/2]")
    r = ball_radius(1)
    return tuple(x for x in SITES if x - 0.5 <= d + r and d - r < x + 0.5)


def safe_sequence(positions: Sequence) -> np.ndarray:
    """Smallest site avoiding contamination by disasters j and j + 1."""
    positions = [_position(p) for p in positions]
    bad = [set(contaminated_intervals(p)) for p in positions]
    out = np.empty(len(positions), dtype=np.int64)
    for j in range(len(positions)):
        banned = bad[j] | (bad[j + 1] if j + 1 < len(positions) else set())
        out[j] = next(x for x in SITES if x not in banned)
    return out


def renewal_times(deltas: Sequence[float]) -> list:
    """Renewal indices for interarrival times ``(D_1, ..., D_n)``.

    rho_0 = 0 and rho_{i+1} is the first j > rho_i + 1 with D_j > D_{j-1};
    indices are 1-based as in the list ``D_1, ..., D_n``.
    """
    d = np.asarray(deltas, dtype=float)
    if np.any(d <= 0):
        raise ValueError("interarrival times must be positive")
    n = len(d)
    out = []
    rho = 0
    j = rho + 2
    while j <= n:
        if d[j - 1] > d[j - 2]:
            out.append(j)
            rho = j
            j = rho + 2
        else:
            j += 1
    return out


def first_renewal(deltas: np.ndarray) -> np.ndarray:
    """rho_1 for each row of ``(n, K)`` interarrivals D_1..D_K (K + 1 when no
    renewal occurs within the row)."""
    inc = deltas[:, 1:] > deltas[:, :-1]
    idx = np.argmax(inc, axis=1) + 2
    return np.where(inc.any(axis=1), idx, deltas.shape[1] + 1)


# --- the trace ----------------------------------------------------------------------


@dataclass
class StrategyTrace:
    t: float
    times: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    safe: np.ndarray
    rhos: list
    renewals: np.ndarray
    n_last: int
    m_last: int
    first: float
    last: float
    sigma: int
    u: float

    @property
    def count(self) -> int:
        return len(self.times)


def build_trace(env: Environment, t: float, modified: bool = False) -> StrategyTrace:
    if env.dimension != 1:
        raise ValueError("the strategy is one-dimensional")
    mask = (env.times < t) & (np.abs(env.positions[:, 0]) <= J7[1])
    if modified:
        mask &= env.times >= 1.0
    times = env.times[mask]
    pos = env.positions[mask, 0]
    if len(times) == 0:
        empty = np.zeros(0)
        return StrategyTrace(t, empty, empty, empty, np.zeros(0, np.int64), [], empty, 0, 0, t, 0.0, 0, 0.0)
    deltas = np.diff(times, prepend=0.0)
    rhos = renewal_times(deltas[1:]) if len(times) > 1 else []
    renewals = times[[0] + rhos]
    n_last = len(times) - 1
    m_last = len(rhos)
    last = float(times[-1])
    u = last - float(renewals[-1])
    return StrategyTrace(
        t, times, pos, deltas, safe_sequence(pos), rhos, renewals, n_last, m_last,
        float(times[0]), last, n_last - m_last, u,
    )


@dataclass(frozen=True)
class Gap:
    start: float
    end: float
    stay: tuple
    landing: tuple
    disaster: int


def _band(x) -> tuple:
    return ((x - 0.5, x + 0.5),)


def strategy_plan(trace: StrategyTrace) -> list:
    """The strategy event as a sequence of gaps between disaster times, each
    with a strip the path must stay in and a set it must land in."""
    if trace.count == 0:
        return []
    T, s = trace.times, trace.safe
    gaps = [Gap(0.0, float(T[0]), J6, _band(s[0]), 0)]
    prev = 0
    for rho in trace.rhos:
        for j in range(prev + 1, rho + 1):
            if j == rho - 1:
                band = _band(s[rho - 2])
                gaps.append(Gap(float(T[j - 1]), float(T[j]), band[0], band, j))
            else:
                gaps.append(Gap(float(T[j - 1]), float(T[j]), J6, _band(s[j]), j))
        prev = rho
    last = trace.n_last
    for j in range(prev + 1, last + 1):
        if j == last:
            band = _band(s[last - 1])
            gaps.append(Gap(float(T[j - 1]), float(T[j]), band[0], band, j))
        else:
            gaps.append(Gap(float(T[j - 1]), float(T[j]), J6, _band(s[j]), j))
    return gaps


def tube_plan(trace: StrategyTrace) -> list:
    """Survival inside J6: at each disaster time land outside its kill interval."""
    r = ball_radius(1)
    gaps = []
    prev = 0.0
    for j, (tj, dj) in enumerate(zip(trace.times, trace.positions)):
        land = tuple(iv for iv in ((J6[0], dj - r), (dj + r, J6[1])) if iv[1] > iv[0])
        gaps.append(Gap(prev, float(tj), J6, land, j))
        prev = float(tj)
    return gaps


# --- guided sampling -------------------------------------------------------------------


def log_gauss_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo < hi, accurate in both tails."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    la, lb = log_ndtr(a), log_ndtr(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return lb + np.log1p(-np.exp(la - lb))


def _land(a, h, intervals, u_pick, u_draw):
    """Draw from N(a, h) restricted to a union of intervals.  Returns the new
    positions and the log of the restricted mass."""
    sd = math.sqrt(h)
    logm = np.stack([log_gauss_mass((lo - a) / sd, (hi - a) / sd) for lo, hi in intervals])
    total = logsumexp(logm, axis=0)
    if len(intervals) == 1:
        choice = np.zeros(len(a), dtype=np.int64)
    else:
        with np.errstate(invalid="ignore"):
            cum = np.cumsum(np.exp(logm - total), axis=0)
        choice = np.minimum((u_pick[None, :] > cum).sum(axis=0), len(intervals) - 1)
    out = np.empty_like(a)
    for k, (lo, hi) in enumerate(intervals):
        sel = choice == k
        if not sel.any():
            continue
        alpha = (lo - a[sel]) / sd
        beta = (hi - a[sel]) / sd
        z = stats.truncnorm.ppf(u_draw[sel], alpha, beta)
        out[sel] = np.clip(a[sel] + sd * z, lo, hi)
    return out, total


@dataclass
class GuidedRun:
    log_z: np.ndarray
    extinct: bool
    violations: int
    n_paths: int


def guided_run(
    plan: list,
    trace: StrategyTrace,
    start: float,
    end: Optional[float],
    n_paths: int,
    seed: SeedLike,
    n_islands: int = 8,
    ess_threshold: float = 0.5,
) -> GuidedRun:
    """Sequential importance sampling of the event described by ``plan`` for
    the path started at ``start`` and either free at time t (``end`` is None)
    or pinned there (``end`` is a point)."""
    stream = as_stream(seed)
    n = n_paths // n_islands
    if n < 2:
        raise ValueError("need at least 2 paths per island")
    t = trace.t
    r = ball_radius(1)
    log_z = np.zeros(n_islands)
    violations = 0
    for isl in range(n_islands):
        pos = np.full(n, float(start))
        lw = np.zeros(n)
        for k, gap in enumerate(plan):
            g = stream.spawn("island", isl, "gap", k).generator()
            u_pick, u_draw = g.random(n), g.random(n)
            h = gap.end - gap.start
            new, logm = _land(pos, h, gap.landing, u_pick, u_draw)
            lw += logm + log_strip_stay(pos, new, h, gap.stay[0], gap.stay[1])
            pos = new
            if gap.disaster >= 0:
                hit = np.abs(pos - trace.positions[gap.disaster]) <= r
                violations += int(np.sum(hit & np.isfinite(lw)))
            if not np.isfinite(lw).any():
                break
            if ess_fraction(lw) < ess_threshold:
                log_z[isl] += logsumexp(lw) - math.log(n)
                u = stream.spawn("island", isl, "gap", k, "resample").generator().random()
                idx = systematic_resample(np.exp(lw - lw.max()), u)
                pos, lw = pos[idx], np.zeros(n)
        if not np.isfinite(lw).any():
            log_z[isl] = -math.inf
            continue
        h = t - (plan[-1].end if plan else 0.0)
        if end is None:
            g = stream.spawn("island", isl, "final").generator()
            u_pick, u_draw = g.random(n), g.random(n)
            new, logm = _land(pos, h, (J6,), u_pick, u_draw)
            lw += logm + log_strip_stay(pos, new, h, J6[0], J6[1])
        else:
            lw += (
                -((end - pos) ** 2) / (2 * h)
                - 0.5 * math.log(2 * math.pi * h)
                + log_strip_stay(pos, np.full(n, float(end)), h, J6[0], J6[1])
                + (start - end) ** 2 / (2 * t)
                + 0.5 * math.log(2 * math.pi * t)
            )
        log_z[isl] += logsumexp(lw) - math.log(n)
    return GuidedRun(log_z, bool(np.isneginf(log_z).any()), violations, n * n_islands)


@dataclass
class StrategyResult:
    strategy: "object"
    tube: "object"
    trace: StrategyTrace
    violations: int


def _as_estimate(run: GuidedRun, stream, tag: str):
    from .estimators import Estimate

    k = len(run.log_z)
    log_mean = float(logsumexp(run.log_z) - math.log(k))
    if math.isfinite(log_mean):
        rel = np.exp(run.log_z - log_mean)
        rel_se = float(np.std(rel, ddof=1) / math.sqrt(k))
        value = math.exp(log_mean)
    else:
        rel_se, value = math.inf, 0.0
    flags = ("extinction",) if run.extinct else ()
    se = value * rel_se if math.isfinite(rel_se) else 0.0
    return Estimate(value, se, run.n_paths, stream.master, tag, log_mean, rel_se, flags)


def simulate_strategy(
    env: Environment,
    t: float,
    x: float = 0.0,
    y: Optional[float] = None,
    n_paths: int = 4000,
    seed: SeedLike = 0,
    *,
    modified: bool = False,
    n_islands: int = 8,
) -> StrategyResult:
    """P(strategy event) and P(no hit and stay in J6) for the path from ``x``
    (to ``y`` if given, else free), sharing random numbers between the two.

    Every sampled strategy path is checked for hits at every disaster time;
    a hit raises ``AssertionError``.
    """
    if not J5[0] <= x <= J5[1] or (y is not None and not J5[0] <= y <= J5[1]):
        raise ValueError("endpoints must lie in J5 = [-5/2, 5/2]")
    stream = as_stream(seed).spawn("strategy")
    trace = build_trace(env, t, modified)
    s_run = guided_run(strategy_plan(trace), trace, x, y, n_paths, stream, n_islands)
    t_run = guided_run(tube_plan(trace), trace, x, y, n_paths, stream, n_islands)
    if s_run.violations:
        raise AssertionError(f"{s_run.violations} strategy paths were hit by a disaster")
    return StrategyResult(
        _as_estimate(s_run, stream, stream.tag + "/event"),
        _as_estimate(t_run, stream, stream.tag + "/tube"),
        trace,
        s_run.violations,
    )


# --- band-to-band costs --------------------------------------------------------------


@dataclass
class BandProbe:
    x_band: int
    y_band: int
    s_grid: np.ndarray
    p: np.ndarray
    stderr: np.ndarray
    worst_start: np.ndarray
    c_values: np.ndarray
    c: float


def band_transfer(u: float, s: float, y_band: int, n: int, rng: np.random.Generator) -> tuple:
    """Monte Carlo estimate of P_u(B(s) in J1_y, B stays in J6 on [0, s])."""
    target = _band(y_band)
    a = np.full(n, float(u))
    new, logm = _land(a, s, target, rng.random(n), rng.random(n))
    w = np.exp(logm + log_strip_stay(a, new, s, J6[0], J6[1]))
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(n))


def band_cost_probe(
    s_grid: Sequence[float],
    x_band: int,
    y_band: int,
    n: int = 20_000,
    seed: SeedLike = 0,
    n_starts: int = 5,
) -> BandProbe:
    """Worst-case (over start points in J1_x) band-to-band probability p(s)
    and the smallest C with -log p(s) <= C/s + C s (x != y) or C s (x == y),
    allowing 3 standard errors."""
    if x_band not in SITES or y_band not in SITES:
        raise ValueError("bands must be in {-2, ..., 2}")
    stream = as_stream(seed).spawn("band-cost", x_band + 2, y_band + 2)
    starts = np.linspace(x_band - 0.5, x_band + 0.5, n_starts)
    s_grid = np.asarray(s_grid, dtype=float)
    p, se, worst, cs = [], [], [], []
    for i, s in enumerate(s_grid):
        best = None
        for k, u in enumerate(starts):
            val, err = band_transfer(u, s, y_band, n, stream.spawn(i, k).generator())
            if best is None or val < best[0]:
                best = (val, err, u)
        val, err, u = best
        p.append(val)
        se.append(err)
        worst.append(u)
        cost = -math.log(val) + 3 * err / val
        scale = s if x_band == y_band else 1 / s + s
        cs.append(cost / scale)
    cs = np.array(cs)
    return BandProbe(x_band, y_band, s_grid, np.array(p), np.array(se), np.array(worst), cs, float(cs.max()))


# --- order statistics of the interarrival times ---------------------------------------


def rho1_pmf(k: int) -> float:
    """P(rho_1 = k) = (k - 1) / k!."""
    if k < 2:
        return 0.0
    return (k - 1) / math.factorial(k)


def renyi_candidate(e: np.ndarray, shift: int) -> np.ndarray:
    """Partial sums sum_{j<=i} E_j / (k - j + shift) for rows of ``e``
    (shift 1 gives the standard representation, shift 0 the (k - j) variant)."""
    k = e.shape[1]
    denom = k - np.arange(1, k + 1) + shift
    with np.errstate(divide="ignore"):
        return np.cumsum(e / denom, axis=1)


def orderstat_identities(k: int, n_samples: int = 1_000_000, seed: SeedLike = 0, level: float = 0.01) -> dict:
    """Goodness-of-fit checks of the renewal structure of Exp(7) interarrivals.

    (a) chi-square of the law of rho_1 (bins 2..8 and a tail bin); (b) KS of
    R_1 - R_0 given rho_1 = k against Gamma(k, 7); (c) two-sample KS of sorted
    Exp(7) k-tuples against the two candidate Renyi forms, Bonferroni over
    components; (d) correlation between the sum of the k interarrivals and
    each normalized interarrival given rho_1 = k.
    """
    if not 2 <= k <= 8:
        raise ValueError("k must lie in 2..8")
    stream = as_stream(seed).spawn("orderstat", k)
    rng = stream.generator()
    width = 12
    deltas = rng.exponential(1 / RATE, size=(n_samples, width))
    rho = first_renewal(deltas)

    bins = np.arange(2, 9)
    observed = np.array([np.sum(rho == b) for b in bins] + [np.sum(rho > 8)], dtype=float)
    probs = np.array([rho1_pmf(b) for b in bins] + [1.0 - sum(rho1_pmf(b) for b in bins)])
    chi = stats.chisquare(observed, probs * n_samples)

    sel = deltas[rho == k, :k]
    sums = sel.sum(axis=1)
    ks_gamma = stats.kstest(sums, stats.gamma(k, scale=1 / RATE).cdf)

    m = min(n_samples, 200_000)
    sorted_tuples = np.sort(rng.exponential(1 / RATE, size=(m, k)), axis=1)
    variants = {}
    for name, shift in (("shifted (k-j)", 0), ("standard (k-j+1)", 1)):
        cand = renyi_candidate(rng.exponential(1 / RATE, size=(m, k)), shift)
        pvals = [float(stats.ks_2samp(sorted_tuples[:, c], cand[:, c]).pvalue) for c in range(k)]
        variants[name] = {"min_pvalue": min(pvals), "passes": min(pvals) * k >= level}
    matching = [name for name, v in variants.items() if v["passes"]]

    normalized = sel / sums[:, None]
    corr_p = [float(stats.pearsonr(sums, normalized[:, c]).pvalue) for c in range(k)]
    return {
        "k": k,
        "n": n_samples,
        "seed": stream.provenance(),
        "pmf_chi2": {"statistic": float(chi.statistic), "pvalue": float(chi.pvalue), "passes": chi.pvalue >= level},
        "gamma_ks": {
            "statistic": float(ks_gamma.statistic),
            "pvalue": float(ks_gamma.pvalue),
            "n": int(len(sums)),
            "passes": ks_gamma.pvalue >= level,
        },
        "renyi": {"variants": variants, "matching": matching},
        "independence": {"min_pvalue": min(corr_p), "passes": min(corr_p) * k >= level},
        "alternative_gamma_mass": 1.0 / (k * (k + 1)),
    }
