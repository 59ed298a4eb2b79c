import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survkit.nonparam import curve_eval, kaplan_meier
from survkit.treatment import (EffectEstimate, hazard_ratio, risk_at_time, rmst, tar,
                               treatment_effect)

from conftest import cohort

# S = 1 on [0, 1), 2/3 on [1, 3), 0 from 3 on
STEP = kaplan_meier(np.array([1.0, 3.0, 3.0]), np.array([1, 1, 1]))


def random_curve(seed, n=30):
    rng = np.random.default_rng(seed)
    return kaplan_meier(rng.exponential(size=n), rng.integers(0, 2, n))


def test_rmst_cases():
    assert abs(rmst(STEP, 3.0) - 7 / 3) < 1e-12
    flat = kaplan_meier(np.array([5.0, 6.0]), np.array([0, 0]))
    assert rmst(flat, 4.0) == 4.0
    assert rmst(STEP, 0.0) == 0.0


def test_risk_and_tar_cases():
    assert risk_at_time(STEP, 0.0) == 0.0
    assert abs(risk_at_time(STEP, 2.0) - 1 / 3) < 1e-12
    assert tar(STEP, 0.5) == 3.0
    assert tar(STEP, 1.0) == 0.0
    stays = kaplan_meier(np.array([1.0, 2.0]), np.array([1, 0]))
    assert tar(stays, 0.2) == math.inf


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_rmst_monotone_and_bounded(seed, a, b):
    c = random_curve(seed)
    lo, hi = sorted((a, b))
    assert rmst(c, lo) <= rmst(c, hi) + 1e-12
    assert rmst(c, hi) <= hi + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 3.0))
def test_tar_monotone_and_risk_complement(seed, a, b, t):
    c = random_curve(seed)
    lo, hi = sorted((a, b))
    assert tar(c, hi) <= tar(c, lo)
    assert abs(risk_at_time(c, t) + curve_eval(c, t) - 1.0) < 1e-15


def test_hazard_ratio_symmetric_arms():
    t = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0] * 2)
    d = np.array([1, 1, 0, 1, 1, 0] * 2)
    a = np.repeat([0, 1], 6)
    assert abs(hazard_ratio((t, d), a) - 1.0) < 1e-4


def test_hazard_ratio_recovers_simulated_value():
    ds, _ = cohort("confounded_treatment", n=4000, seed=0, confounding=0.0,
                   confounder_effect=0.0, omega=math.log(0.5))
    hr = hazard_ratio(ds, ds.treatment)
    assert 0.42 < hr < 0.59
    assert abs(hazard_ratio(ds, 1 - ds.treatment) - 1 / hr) < 1e-8


def test_effect_is_deterministic_and_parallel_safe():
    ds, truth = cohort("confounded_treatment", n=400, seed=3)
    args = ("restricted_mean", ds, ds.treatment, truth.propensity, 1.0)
    a = treatment_effect(*args, n_bootstrap=40, seed=7)
    b = treatment_effect(*args, n_bootstrap=40, seed=7)
    c = treatment_effect(*args, n_bootstrap=40, seed=7, n_jobs=2)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    np.testing.assert_array_equal(a.replicates, c.replicates)
    assert a.point == b.point == c.point
    assert a.replicates.size == 40


def test_constant_propensity_matches_unweighted_bootstrap():
    ds, _ = cohort("hte_subgroup", n=300, seed=4)
    plain = treatment_effect("restricted_mean", ds, ds.treatment, None, 1.0, n_bootstrap=60, seed=2)
    half = treatment_effect("restricted_mean", ds, ds.treatment, np.full(ds.n, 0.5), 1.0,
                            n_bootstrap=60, seed=2)
    np.testing.assert_array_equal(plain.replicates, half.replicates)
    assert abs(half.summary["mean"] - plain.summary["mean"]) <= plain.summary["std"]
    assert half.point == plain.point


def test_summary_recomputes_from_replicates():
    ds, _ = cohort("hte_subgroup", n=300, seed=5)
    est = treatment_effect("hazard_ratio", ds, ds.treatment, n_bootstrap=30, seed=1)
    r = est.replicates
    s = est.summary
    assert s["mean"] == float(r.mean())
    assert s["std"] == float(r.std(ddof=1))
    assert (s["q025"], s["q975"]) == (float(np.percentile(r, 2.5)), float(np.percentile(r, 97.5)))
    again = EffectEstimate(**{k: v for k, v in est.__dict__.items()})
    assert again.summary == s


def test_rmst_difference_of_exponential_arms():
    rng = np.random.default_rng(11)
    a = np.repeat([1, 0], 1000)
    t = np.where(a == 1, rng.exponential(1.0, 2000), rng.exponential(0.5, 2000))
    est = treatment_effect("restricted_mean", (t, np.ones(2000, int)), a, horizon=1.0,
                           n_bootstrap=20, seed=0)
    expected = (1 - math.exp(-1)) - (1 - math.exp(-2)) / 2
    assert abs(est.point - expected) < 0.03


def test_undefined_time_at_risk_is_nan():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    est = treatment_effect("time_at_risk", (t, np.array([1, 0, 1, 0])), np.array([1, 1, 0, 0]),
                           level=0.1, n_bootstrap=5, seed=0)
    assert math.isnan(est.point)
    assert est.summary["n_finite"] <= 5


def test_effect_argument_errors():
    t = np.arange(1.0, 5.0)
    d = np.ones(4, int)
    with pytest.raises(ValueError):
        treatment_effect("restricted_mean", (t, d), np.array([1, 1, 0, 0]), n_bootstrap=5)
    with pytest.raises(ValueError):
        treatment_effect("hazard_ratio", (t, d), np.ones(4, int), n_bootstrap=5)
    with pytest.raises(ValueError):
        treatment_effect("median", (t, d), np.array([1, 1, 0, 0]))
