import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from disaster_polymer.environment import Environment, Window, sample_environment
from disaster_polymer.path_survival import strip_stay_probability
from disaster_polymer.strategy import (
    J6,
    SITES,
    Bands,
    build_trace,
    contaminated_intervals,
    first_renewal,
    band_cost_probe,
    log_gauss_mass,
    orderstat_identities,
    renewal_times,
    renyi_candidate,
    rho1_pmf,
    safe_sequence,
    simulate_strategy,
    strategy_plan,
    tube_plan,
)
from disaster_polymer.streams import Stream

W = Window(10.0, ((-30.0, 30.0),))
positions = st.floats(-3.5, 3.5, allow_nan=False)


def env_of(rows):
    return Environment.from_points(W, rows)


# --- bands and contamination ---


def test_bands_tile_j5():
    assert Bands().covers_j5()
    assert not Bands(sites=(-2, -1, 1, 2)).covers_j5()


@pytest.mark.parametrize(
    "d, expected", [(0.0, (0, 1)), (2.0, (2,)), (3.4, ()), (-3.4, ()), (0.5, (0, 1)), (-0.5, (-1, 0))]
)
def test_contamination_examples(d, expected):
    assert contaminated_intervals(d) == expected


def test_contamination_range():
    with pytest.raises(ValueError):
        contaminated_intervals(3.6)


@given(positions, st.sampled_from(SITES), st.floats(0.0, 0.999999))
def test_contamination_is_exact(d, x, frac):
    y = x - 0.5 + frac
    if x not in contaminated_intervals(d):
        assert abs(y - d) > 0.5
    assert len(contaminated_intervals(d)) <= 2


@given(positions, st.sampled_from(SITES))
def test_contaminated_band_really_meets_kill_interval(d, x):
    if x in contaminated_intervals(d):
        lo, hi = max(x - 0.5, d - 0.5), min(x + 0.5, d + 0.5)
        assert lo <= hi and (lo < x + 0.5)


@given(st.lists(positions, min_size=1, max_size=20))
def test_safe_sequence_avoids_neighbours(ps):
    safe = safe_sequence(ps)
    for j, x in enumerate(safe):
        assert x not in contaminated_intervals(ps[j])
        if j + 1 < len(ps):
            assert x not in contaminated_intervals(ps[j + 1])


# --- renewals ---


def test_renewal_examples():
    assert renewal_times([3, 1, 2]) == [3]
    assert renewal_times([1, 2, 3, 4]) == [2, 4]
    assert renewal_times([4, 3, 2, 1]) == []
    with pytest.raises(ValueError):
        renewal_times([1, 0])


@given(st.lists(st.floats(0.01, 5.0), min_size=2, max_size=12))
def test_renewal_gaps_and_vector_form(ds):
    rhos = renewal_times(ds)
    prev = 0
    for r in rhos:
        assert r >= prev + 2 and ds[r - 1] > ds[r - 2]
        prev = r
    first = first_renewal(np.asarray(ds)[None, :])[0]
    assert first == (rhos[0] if rhos else len(ds) + 1)


def test_rho1_pmf_sums_to_one():
    assert rho1_pmf(1) == 0.0
    assert sum(rho1_pmf(k) for k in range(2, 30)) == pytest.approx(1.0)


def test_renyi_variants():
    e = np.ones((1, 3))
    assert np.allclose(renyi_candidate(e, 1)[0], [1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2 + 1])
    assert np.isinf(renyi_candidate(e, 0)[0, -1])


# --- plans ---


def test_plan_structure():
    env = env_of([(0.5, 0.0), (1.5, 2.0), (1.8, -1.0), (2.6, 3.0), (3.0, 9.0)])
    trace = build_trace(env, 4.0)
    assert trace.count == 4 and trace.times.tolist() == [0.5, 1.5, 1.8, 2.6]
    plan = strategy_plan(trace)
    assert [g.end for g in plan] == trace.times.tolist()
    for g in plan:
        (lo, hi), = g.landing
        site = int(round((lo + hi) / 2))
        assert site not in contaminated_intervals(trace.positions[g.disaster])
    # interarrivals after the first are (1.0, 0.3, 0.8): one renewal at index 3,
    # so the shortest gap before it is spent inside a single band
    assert trace.rhos == [3]
    confined = [k for k, g in enumerate(plan) if g.stay != J6]
    assert confined == [2] and plan[2].stay == plan[2].landing[0]
    assert [g.end for g in tube_plan(trace)] == trace.times.tolist()
    assert build_trace(env, 4.0, modified=True).count == 3


def test_log_gauss_mass_tails():
    assert float(log_gauss_mass(-np.inf, np.inf)) == pytest.approx(0.0)
    assert float(log_gauss_mass(40.0, 41.0)) == pytest.approx(-40**2 / 2 - math.log(40 * math.sqrt(2 * math.pi)), rel=1e-3)


# --- probabilities against quadrature ---


def test_no_disasters_equals_strip_survival(series):
    res = simulate_strategy(env_of([]), 4.0, n_paths=8000, seed=1)
    exact = series(0.0, -3.0, 3.0, 4.0)
    assert abs(res.strategy.value - exact) <= 4 * res.strategy.stderr
    pinned = simulate_strategy(env_of([]), 4.0, 0.0, 1.0, n_paths=800, seed=1)
    bridge = float(strip_stay_probability(0.0, 1.0, 4.0, -3.0, 3.0))
    assert pinned.strategy.value == pytest.approx(bridge, rel=1e-10)


def test_tube_probability_single_disaster(kernel, series):
    env = env_of([(1.0, 0.3)])
    res = simulate_strategy(env, 2.0, n_paths=16_000, seed=2)
    f = lambda y: kernel(0.0, y, -3.0, 3.0, 1.0)[0] * series(y, -3.0, 3.0, 1.0)
    exact = integrate.quad(f, -3, -0.2)[0] + integrate.quad(f, 0.8, 3)[0]
    assert abs(res.tube.value - exact) <= 4 * res.tube.stderr
    assert res.strategy.value <= res.tube.value


def test_strategy_never_hit_and_below_tube():
    for j in range(5):
        env = sample_environment(Window.for_horizon(6.0, 1), Stream(4).spawn(j))
        res = simulate_strategy(env, 6.0, n_paths=800, seed=j)
        assert res.violations == 0
        assert math.isfinite(res.strategy.log_value)
        assert res.strategy.log_value <= res.tube.log_value + 3 * (res.strategy.log_stderr + res.tube.log_stderr)


def test_endpoints_checked():
    with pytest.raises(ValueError):
        simulate_strategy(env_of([]), 2.0, x=3.0)


def test_band_probe_anchor(kernel):
    probe = band_cost_probe([1.0], 0, 0, n=20_000, seed=0)
    # worst start is the band edge; exact value from the killed-kernel series
    assert abs(probe.worst_start[0]) == 0.5
    exact = integrate.quad(lambda y: kernel(0.5, y, -3.0, 3.0, 1.0)[0], -0.5, 0.5)[0]
    assert exact == pytest.approx(0.341344, abs=1e-6)
    assert abs(probe.p[0] - exact) <= 4 * probe.stderr[0]
    assert probe.c == pytest.approx(probe.c_values.max())
    with pytest.raises(ValueError):
        band_cost_probe([1.0], 3, 0)


# --- order statistics ---


def test_orderstat_small_run():
    out = orderstat_identities(3, 100_000, seed=1)
    assert out["pmf_chi2"]["passes"] and out["gamma_ks"]["passes"]
    assert out["renyi"]["matching"] == ["standard (k-j+1)"]
    assert out["alternative_gamma_mass"] == pytest.approx(1 / 12)
    with pytest.raises(ValueError):
        orderstat_identities(1, 10)
