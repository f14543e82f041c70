"""The space-time Poisson field of disasters.

An :class:`Environment` is a finite realization of a unit-intensity Poisson
point process on a window ``[0, T_max] x box``.  Disasters are stored as two
read-only arrays (times and positions) kept sorted by time, ties broken by
lexicographic position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .streams import SeedLike, as_stream


def ball_radius(d: int) -> float:
    """Radius of the Euclidean ball of unit volume in dimension ``d``."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if d == 1:
        return 0.5
    return math.exp((math.lgamma(d / 2 + 1) - (d / 2) * math.log(math.pi)) / d)


@dataclass(frozen=True)
class TubeGeometry:
    dimension: int

    @property
    def ball_radius(self) -> float:
        return ball_radius(self.dimension)

    def ball_volume(self) -> float:
        d = self.dimension
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.ball_radius**d


@dataclass(frozen=True)
class Disaster:
    time: float
    position: tuple

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError("disaster time must be >= 0")
        if len(self.position) < 1:
            raise ValueError("disaster position needs at least one coordinate")


@dataclass(frozen=True)
class Window:
    t_max: float
    box: tuple

    def __post_init__(self):
        if not self.t_max >= 0:
            raise ValueError("t_max must be >= 0")
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        if not box:
            raise ValueError("window needs at least one spatial interval")
        for lo, hi in box:
            if not lo <= hi:
                raise ValueError(f"empty spatial interval [{lo}, {hi}]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "t_max", float(self.t_max))

    @property
    def dimension(self) -> int:
        return len(self.box)

    def volume(self) -> float:
        return self.t_max * math.prod(hi - lo for lo, hi in self.box)

    @classmethod
    def for_horizon(cls, t: float, d: int = 1) -> "Window":
        """Smallest symmetric window that holds every disaster a path can meet
        before time ``t`` without leaving the ball of radius ``ceil(t)**2``."""
        half = math.ceil(t) ** 2 + ball_radius(d)
        return cls(float(t), ((-half, half),) * d)

    def contains(self, times: np.ndarray, positions: np.ndarray) -> np.ndarray:
        inside = (times >= 0) & (times <= self.t_max)
        for c, (lo, hi) in enumerate(self.box):
            inside &= (positions[:, c] >= lo) & (positions[:, c] <= hi)
        return inside


# --- time-interval sets ------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    closed_lo: bool = True
    closed_hi: bool = True

    def is_empty(self) -> bool:
        if self.lo < self.hi:
            return False
        return not (self.lo == self.hi and self.closed_lo and self.closed_hi)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        left = x >= self.lo if self.closed_lo else x > self.lo
        right = x <= self.hi if self.closed_hi else x < self.hi
        return left & right

    def intersect(self, other: "Interval") -> "Interval":
        if self.lo > other.lo:
            lo, clo = self.lo, self.closed_lo
        elif other.lo > self.lo:
            lo, clo = other.lo, other.closed_lo
        else:
            lo, clo = self.lo, self.closed_lo and other.closed_lo
        if self.hi < other.hi:
            hi, chi = self.hi, self.closed_hi
        elif other.hi < self.hi:
            hi, chi = other.hi, other.closed_hi
        else:
            hi, chi = self.hi, self.closed_hi and other.closed_hi
        return Interval(lo, hi, clo, chi)


class IntervalSet:
    """A finite union of (possibly half-open) intervals of the time axis."""

    def __init__(self, intervals: Iterable[Interval] = ()):
        self.intervals = tuple(iv for iv in intervals if not iv.is_empty())

    @classmethod
    def of(cls, *pairs: tuple) -> "IntervalSet":
        return cls(Interval(float(lo), float(hi)) for lo, hi in pairs)

    @classmethod
    def everything(cls) -> "IntervalSet":
        return cls([Interval(-math.inf, math.inf)])

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for iv in self.intervals:
            out |= iv.contains(x)
        return out

    def __and__(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(a.intersect(b) for a in self.intervals for b in other.intervals)

    def __or__(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(self.intervals + other.intervals)

    def complement(self) -> "IntervalSet":
        pieces = IntervalSet.everything()
        for iv in self.intervals:
            gaps = IntervalSet(
                [
                    Interval(-math.inf, iv.lo, True, not iv.closed_lo),
                    Interval(iv.hi, math.inf, not iv.closed_hi, True),
                ]
            )
            pieces = pieces & gaps
        return pieces

    def __repr__(self):
        parts = [
            f"{'[' if iv.closed_lo else '('}{iv.lo}, {iv.hi}{']' if iv.closed_hi else ')'}"
            for iv in self.intervals
        ]
        return "IntervalSet(" + " U ".join(parts) + ")"


def stripe_complement(lo: float, hi: float) -> IntervalSet:
    """``[lo, hi]^c``, the times kept by the restriction that removes a stripe."""
    return IntervalSet.of((lo, hi)).complement()


# --- the environment ----------------------------------------------------------


def _sorted_order(times: np.ndarray, positions: np.ndarray) -> np.ndarray:
    keys = [positions[:, c] for c in range(positions.shape[1] - 1, -1, -1)]
    return np.lexsort(keys + [times])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


class Environment:
    """Immutable, time-sorted finite set of disasters inside a window."""

    __slots__ = ("window", "times", "positions")

    def __init__(self, window: Window, times, positions, *, presorted: bool = False):
        d = window.dimension
        times = np.asarray(times, dtype=float).reshape(-1)
        positions = np.asarray(positions, dtype=float).reshape(len(times), d)
        if not presorted and len(times):
            order = _sorted_order(times, positions)
            times, positions = times[order], positions[order]
        if len(times):
            if not window.contains(times, positions).all():
                raise ValueError("disaster outside the window")
            same = (np.diff(times) == 0) & np.all(np.diff(positions, axis=0) == 0, axis=1)
            if same.any():
                raise ValueError("duplicate disaster")
        self.window = window
        self.times = _readonly(times)
        self.positions = _readonly(positions)

    @property
    def dimension(self) -> int:
        return self.window.dimension

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[Disaster]:
        for s, x in zip(self.times, self.positions):
            yield Disaster(float(s), tuple(float(v) for v in x))

    @property
    def disasters(self) -> list:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.window == other.window
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.positions, other.positions)
        )

    def __repr__(self) -> str:
        return f"Environment(d={self.dimension}, n={len(self)}, window={self.window})"

    @classmethod
    def from_points(cls, window: Window, points: Sequence[Sequence[float]]) -> "Environment":
        """Build from rows ``(t, x1, ..., xd)``."""
        d = window.dimension
        arr = np.asarray(points, dtype=float).reshape(-1, d + 1)
        return cls(window, arr[:, 0], arr[:, 1:])

    def points(self) -> np.ndarray:
        return np.column_stack([self.times, self.positions])

    def in_times(self, lo: float, hi: float) -> np.ndarray:
        """Indices of disasters with ``lo <= time < hi``."""
        a = np.searchsorted(self.times, lo, side="left")
        b = np.searchsorted(self.times, hi, side="left")
        return np.arange(a, b)

    # --- serialization ---
    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "window": {"t_max": self.window.t_max, "box": [list(b) for b in self.window.box]},
            "disasters": [[float(v) for v in row] for row in self.points()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Environment":
        window = Window(data["window"]["t_max"], tuple(tuple(b) for b in data["window"]["box"]))
        if int(data["dimension"]) != window.dimension:
            raise ValueError("dimension does not match the window box")
        return cls.from_points(window, data["disasters"])

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))


def sample_environment(window: Window, seed: SeedLike) -> Environment:
    """Unit-intensity Poisson sample on ``window``."""
    rng = as_stream(seed).generator()
    n = int(rng.poisson(window.volume())) if window.volume() > 0 else 0
    times = rng.uniform(0.0, window.t_max, size=n)
    positions = np.empty((n, window.dimension))
    for c, (lo, hi) in enumerate(window.box):
        positions[:, c] = rng.uniform(lo, hi, size=n)
    return Environment(window, times, positions)


def restrict(env: Environment, keep: IntervalSet) -> Environment:
    mask = keep.contains(env.times)
    return Environment(env.window, env.times[mask], env.positions[mask], presorted=True)


def shift(env: Environment, dt: float, dx) -> Environment:
    """Move every disaster ``(t, x)`` to ``(t - dt, x - dx)``; points leaving
    the window are dropped."""
    dx = np.broadcast_to(np.asarray(dx, dtype=float), (env.dimension,))
    times = env.times - dt
    positions = env.positions - dx
    inside = env.window.contains(times, positions)
    return Environment(env.window, times[inside], positions[inside])


def resample_stripe(env: Environment, i: int, seed: SeedLike) -> Environment:
    """Replace the disasters of the stripe ``[i, i+1)`` by a fresh sample."""
    if not 0 <= i < env.window.t_max:
        raise ValueError("stripe index outside the window")
    hi = min(i + 1.0, env.window.t_max)
    keep = ~((env.times >= i) & (env.times < hi))
    stripe = Window(hi - i, env.window.box)
    fresh = sample_environment(stripe, seed)
    fresh_times = fresh.times + i
    # the fresh sample lives on the closed stripe; drop a point landing on hi
    ok = fresh_times < hi
    times = np.concatenate([env.times[keep], fresh_times[ok]])
    positions = np.concatenate([env.positions[keep], fresh.positions[ok]])
    return Environment(env.window, times, positions)
