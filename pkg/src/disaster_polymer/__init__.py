"""Brownian directed polymer among space-time Poissonian disasters."""

from .environment import (
    Disaster,
    Environment,
    Interval,
    IntervalSet,
    TubeGeometry,
    Window,
    ball_radius,
    resample_stripe,
    restrict,
    sample_environment,
    shift,
    stripe_complement,
)
from .path_survival import (
    DeathClock,
    PathSkeleton,
    SurvivalVerdict,
    check_truncation,
    evaluate,
    oracle_survival_quadrature,
    sample_skeleton,
)
from .streams import Stream, as_stream

__version__ = "0.1.0"
