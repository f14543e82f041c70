import math

import numpy as np
import pytest
from scipy import integrate

from disaster_polymer import estimators as est_mod
from disaster_polymer.environment import Environment, Window, sample_environment
from disaster_polymer.estimators import (
    Estimate,
    FreeEnergyPoint,
    ParticleBudgetError,
    _escalating,
    annealed_Z,
    concentration_from_points,
    concentration_scan,
    doubling_diagnostic,
    env_stream,
    estimate_Z_crude,
    extrapolate_p,
    first_disaster_mechanism,
    free_energy_curve,
    sample_horizon_environment,
    stripe_influence,
    stripe_removal_gap,
    superadditivity_check,
    truncated_inverse_mean,
)
from disaster_polymer.path_survival import INF, oracle_survival_quadrature
from disaster_polymer.smc import SmcConfig
from disaster_polymer.streams import Stream

W = Window(10.0, ((-30.0, 30.0),))


def point(t, value, se, beta=1.0, logs=None):
    logs = np.zeros(3) if logs is None else logs
    return FreeEnergyPoint(beta, t, Estimate(value, se, 10, 0, "x"), len(logs), logs)


# --- single environment ---


def test_estimate_validation():
    with pytest.raises(ValueError):
        Estimate(1.0, -1.0, 1, 0, "x")
    with pytest.raises(ValueError):
        Estimate(1.0, 0.0, 0, 0, "x")
    e = Estimate(0.0, 0.0, 4, 3, "a/b", flags=("extinction",))
    assert e.extinct and e.provenance() == {"master_seed": 3, "tag": "a/b"}


def test_annealed():
    assert annealed_Z(0.0, 5.0) == 1.0
    assert annealed_Z(INF, 2.0) == pytest.approx(math.exp(-2.0))
    assert annealed_Z(1.0, 3.0) == pytest.approx(math.exp(-3.0 * (1 - math.exp(-1.0))))
    with pytest.raises(ValueError):
        annealed_Z(-1.0, 1.0)


def test_crude_matches_oracle():
    env = Environment.from_points(W, [(0.5, 0.3), (1.5, -0.2)])
    exact = oracle_survival_quadrature(env, 2.0, 2.0)
    est = estimate_Z_crude(env, 2.0, 2.0, n_paths=100_000, seed=1)
    assert abs(est.value - exact) <= 4 * est.stderr
    assert est.tag == "crude" and est.n == 100_000


def test_crude_is_chunk_independent_in_law_and_deterministic():
    env = sample_environment(Window.for_horizon(3.0, 1), 5)
    a = estimate_Z_crude(env, 1.0, 3.0, n_paths=5000, seed=2)
    b = estimate_Z_crude(env, 1.0, 3.0, n_paths=5000, seed=2)
    assert a == b
    with pytest.raises(ValueError):
        estimate_Z_crude(env, 1.0, 3.0, n_paths=1)


def test_annealed_mean_small_scale():
    t, beta = 2.0, 1.0
    vals = [
        estimate_Z_crude(sample_horizon_environment(4, "annealed", j, t), beta, t, n_paths=2000, seed=j).value
        for j in range(300)
    ]
    se = np.std(vals, ddof=1) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - annealed_Z(beta, t)) <= 4 * se


def test_doubling_diagnostic_keys():
    env = sample_environment(Window.for_horizon(4.0, 1), 3)
    out = doubling_diagnostic(env, 1.0, 4.0, SmcConfig(1600), 0)
    assert set(out) == {"log_z_N", "log_z_2N", "gap", "log_stderr_N", "log_stderr_2N"}
    assert abs(out["gap"]) < 1.0


# --- many environments ---


def test_environment_streams_ignore_beta():
    a = free_energy_curve(1.0, [3.0], 4, SmcConfig(400), 5, workers=1)
    b = free_energy_curve(1.0, [3.0], 4, SmcConfig(400), 5, workers=2)
    assert np.array_equal(a[0].log_estimates, b[0].log_estimates)
    assert env_stream(5, "free-energy", 0, 3.0) == env_stream(5, "free-energy", 0, 3.0)


def test_free_energy_at_zero_beta_vanishes():
    (pt,) = free_energy_curve(0.0, [4.0], 5, SmcConfig(400), 1, workers=1)
    assert pt.a_hat.value == 0.0 and pt.rate == 0.0


def test_free_energy_below_jensen_bound():
    t, beta = 6.0, 1.0
    (pt,) = free_energy_curve(beta, [t], 20, SmcConfig(2000), 2, workers=1)
    bound = -(t - 1) * (1 - math.exp(-beta))
    assert pt.a_hat.value <= bound + 3 * pt.a_hat.stderr


def test_escalation_and_censoring(monkeypatch):
    calls = []

    def always_extinct(cfg, attempt):
        calls.append((cfg.n_particles, attempt))
        return (None, True)

    assert _escalating(always_extinct, SmcConfig(100))[1] is True
    assert calls == [(100, 0), (400, 1), (1600, 2)]

    def fake(env, beta, t, modified, cfg, seed, truncate):
        return Estimate(0.0, 0.0, 1, 0, "x", -math.inf, math.inf, ("extinction",))

    monkeypatch.setattr(est_mod, "estimate_Z_smc", fake)
    with pytest.raises(ParticleBudgetError, match="particle budget insufficient"):
        free_energy_curve(1.0, [3.0], 3, SmcConfig(100), 0, workers=1)


# --- extrapolation ---


def test_extrapolation_recovers_exact_model():
    ts = [8.0, 16.0, 32.0, 64.0]
    pts = [point(t, t * (-1.1 + 0.7 / math.sqrt(t)), 0.05 * t) for t in ts]
    fit = extrapolate_p(pts)
    assert fit.p_hat == pytest.approx(-1.1, abs=1e-10)
    assert fit.slope == pytest.approx(0.7, abs=1e-9)
    lo, hi = fit.interval
    assert lo < -1.1 < hi
    p_hat, interval = fit
    assert p_hat == fit.p_hat and interval == fit.interval


def test_extrapolation_equal_weight_fallback_and_errors():
    pts = [point(t, -t, 0.0) for t in (2.0, 4.0, 8.0)]
    assert extrapolate_p(pts).p_hat == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="degenerate design"):
        extrapolate_p(pts[:2])
    with pytest.raises(ValueError, match="degenerate design"):
        extrapolate_p([pts[0], pts[0], pts[1]])


# --- superadditivity ---


def test_superadditivity_regression_anchor():
    rep = superadditivity_check(1.0, 4, 4, 6, SmcConfig(2000), seed=11, workers=1)
    # frozen from a reference run of this configuration
    assert rep.a_s.value == pytest.approx(-2.5294177799086524, rel=1e-9)
    assert rep.a_t.value == pytest.approx(-2.025937155270133, rel=1e-9)
    assert rep.a_sum.value == pytest.approx(-4.616437103680851, rel=1e-9)
    assert rep.slack == pytest.approx(rep.a_sum.value - rep.a_s.value - rep.a_t.value)
    assert rep.bound == pytest.approx(-(8**0.45)) and rep.holds
    with pytest.raises(ValueError):
        superadditivity_check(1.0, 1, 4, 2)


# --- stripe influence ---


def test_stripe_gap_zero_for_empty_stripe():
    env = Environment.from_points(W, [(0.5, 0.0), (2.5, 0.1)])
    assert stripe_removal_gap(env, 1.0, 4.0, 1, SmcConfig(400), 0) == (0.0, False)
    gap, cens = stripe_removal_gap(env, 1.0, 4.0, 2, SmcConfig(4000), 0)
    assert gap > 0 and not cens


def test_stripe_influence_validation_and_sign():
    with pytest.raises(ValueError):
        stripe_influence(1.0, 4.0, 0, 2)
    with pytest.raises(ValueError):
        stripe_influence(1.0, 4.0, 4, 2)
    est = stripe_influence(1.0, 4.0, 2, 4, SmcConfig(800), 3, workers=1)
    assert est.value >= 0 and est.n == 4


# --- first-disaster mechanism ---


def test_truncated_inverse_mean_against_quadrature():
    lam, t, m = 0.5, 4.0, 50.0
    f = lambda s: min(1 / s, m) * lam * math.exp(-lam * s)
    num, _ = integrate.quad(f, 0, t, points=[1 / m], limit=200)
    assert truncated_inverse_mean(lam, t, m) == pytest.approx(num, rel=1e-8)


def test_first_disaster_logarithmic_growth():
    rep = first_disaster_mechanism([10.0, 100.0, 1000.0], 400_000, seed=1)
    assert np.all(np.abs(rep.means - rep.exact) <= 4 * rep.stderrs)
    assert rep.slope == pytest.approx(rep.rate, rel=0.1)
    assert np.allclose(rep.modified_means, rep.modified_exact, rtol=0.02)
    assert rep.modified_ratio == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError):
        first_disaster_mechanism([2.0], 10)


# --- concentration ---


def test_concentration_from_points():
    rng = np.random.default_rng(0)
    pts = [point(t, 0.0, 0.1, logs=rng.normal(0, t**0.5, 400)) for t in (4.0, 16.0, 64.0)]
    rep = concentration_from_points(pts, seed=1, n_boot=200)
    assert rep.slope == pytest.approx(0.5, abs=0.1)
    assert np.all(rep.sd_ci[:, 0] <= rep.sd) and np.all(rep.sd <= rep.sd_ci[:, 1])
    with pytest.raises(ValueError):
        concentration_scan(1.0, [4.0], 10)


def test_disjoint_environment_ranges_pool():
    whole = free_energy_curve(1.0, [3.0], 4, SmcConfig(400), 6, workers=1)[0].log_estimates
    head = free_energy_curve(1.0, [3.0], 2, SmcConfig(400), 6, workers=1)[0].log_estimates
    tail = free_energy_curve(1.0, [3.0], 2, SmcConfig(400), 6, workers=1, start_env=2)[0].log_estimates
    assert np.array_equal(whole, np.concatenate([head, tail]))
