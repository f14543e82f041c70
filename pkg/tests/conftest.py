import math

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def strip_survival_series(a: float, lo: float, hi: float, t: float, terms: int = 400) -> float:
    """P_a(Brownian motion stays in (lo, hi) up to time t), eigenfunction series."""
    w = hi - lo
    x = a - lo
    n = np.arange(1, terms + 1)
    coef = 2.0 / (n * np.pi) * (1.0 - np.cos(n * np.pi))
    return float(np.sum(coef * np.sin(n * np.pi * x / w) * np.exp(-(n * np.pi / w) ** 2 * t / 2)))


def killed_kernel_series(a, b, lo, hi, t, terms: int = 400):
    """Transition density of Brownian motion killed on leaving (lo, hi)."""
    w = hi - lo
    n = np.arange(1, terms + 1)[:, None]
    a = np.atleast_1d(np.asarray(a, dtype=float))[None, :] - lo
    b = np.atleast_1d(np.asarray(b, dtype=float))[None, :] - lo
    return np.sum(
        2.0 / w * np.sin(n * np.pi * a / w) * np.sin(n * np.pi * b / w) * np.exp(-(n * np.pi / w) ** 2 * t / 2),
        axis=0,
    )


@pytest.fixture
def series():
    return strip_survival_series


@pytest.fixture
def kernel():
    return killed_kernel_series


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
