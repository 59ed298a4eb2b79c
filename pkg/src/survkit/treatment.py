"""Treatment-arm comparisons and the IPTW-weighted bootstrap.

Effects are treated minus control for RMST, risk and time-at-risk, and the
hazard ratio (treated over control) for ``hazard_ratio``.  With a propensity
score ``e(x)`` the bootstrap draws rows with probability proportional to
``1/e`` (treated) or ``1/(1-e)`` (control); the full-data point estimate
uses the same numbers as case weights.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .coxph import cox_fit
from .data import SurvivalDataset
from .metrics import outcomes_of
from .nonparam import curve_eval, kaplan_meier
from .numerics import ConvergenceError, logistic_fit, make_rng, weighted_draw

METRICS = ("hazard_ratio", "restricted_mean", "risk_at_time", "time_at_risk")
MAX_REDRAWS = 100


def rmst(curve, horizon):
    """Area under a survival step curve on ``[0, horizon]``."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    knots = curve.jump_times[curve.jump_times < horizon]
    edges = np.concatenate([[0.0], knots, [float(horizon)]])
    values = np.concatenate([[curve.initial_value], curve.values[:knots.size]])
    return float(np.sum(np.diff(edges) * values))


def risk_at_time(curve, t):
    return 1.0 - float(curve_eval(curve, t))


def tar(curve, level):
    """First time the survival curve is at or below ``level``; ``math.inf`` if never."""
    if curve.initial_value <= level:
        return 0.0
    hit = np.flatnonzero(curve.values <= level)
    return float(curve.jump_times[hit[0]]) if hit.size else math.inf


def hazard_ratio(outcomes, treatment, weights=None):
    """``exp(beta)`` of a univariate (optionally weighted) Cox model on the arm indicator."""
    times, events = outcomes_of(outcomes)
    a = np.asarray(treatment, dtype=float).ravel()
    model = cox_fit(SurvivalDataset(a[:, None], times, events, weights=weights))
    return float(np.exp(model.theta[0]))


def arm_metric(metric, times, events, treatment, weights=None, horizon=None, level=None):
    """Treated-versus-control contrast of one metric on (optionally weighted) data."""
    if metric == "hazard_ratio":
        return hazard_ratio((times, events), treatment, weights)
    values = []
    for arm in (1, 0):
        sel = treatment == arm
        curve = kaplan_meier(times[sel], events[sel], None if weights is None else weights[sel])
        if metric == "restricted_mean":
            values.append(rmst(curve, horizon))
        elif metric == "risk_at_time":
            values.append(risk_at_time(curve, horizon))
        else:
            values.append(tar(curve, level))
    if math.isinf(values[0]) or math.isinf(values[1]):
        return math.nan
    return values[0] - values[1]


def iptw_weights(treatment, propensity, clip=(0.01, 0.99)):
    e = np.clip(np.asarray(propensity, dtype=float).ravel(), clip[0], clip[1])
    return np.where(np.asarray(treatment) == 1, 1.0 / e, 1.0 / (1.0 - e))


def propensity_scores(features, treatment, l2=1.0):
    """Logistic-regression estimate of P(A = 1 | x)."""
    model = logistic_fit(features, treatment, l2=l2)
    return model.predict_proba(features)


@dataclass
class EffectEstimate:
    metric: str
    point: float
    replicates: np.ndarray
    seed: int
    adjusted: bool = False
    horizon: float = None
    level: float = None
    info: dict = field(default_factory=dict)

    @property
    def summary(self):
        """Mean, SD (n-1), 2.5 / 97.5 percentiles over the finite replicates."""
        r = self.replicates[np.isfinite(self.replicates)]
        if r.size == 0:
            return {"mean": math.nan, "std": math.nan, "q025": math.nan, "q975": math.nan,
                    "n_finite": 0}
        return {"mean": float(r.mean()), "std": float(r.std(ddof=1)) if r.size > 1 else 0.0,
                "q025": float(np.percentile(r, 2.5)), "q975": float(np.percentile(r, 97.5)),
                "n_finite": int(r.size)}

    def interval(self):
        s = self.summary
        return s["q025"], s["q975"]

    def to_dict(self):
        return {"metric": self.metric, "point": self.point, "adjusted": self.adjusted,
                "horizon": self.horizon, "level": self.level, "seed": self.seed,
                "n_bootstrap": int(self.replicates.size), "summary": self.summary,
                "replicates": [float(v) for v in self.replicates], "info": self.info}


def _replicate(b, seed, metric, times, events, a, probs, horizon, level):
    rng = make_rng(seed, b)
    for _ in range(MAX_REDRAWS):
        idx = weighted_draw(rng, probs, times.size)
        arms = a[idx]
        if arms.min() != arms.max():
            break
    else:
        raise RuntimeError(f"bootstrap replicate {b} kept drawing a single arm")
    try:
        return arm_metric(metric, times[idx], events[idx], arms, None, horizon, level)
    except ConvergenceError:
        return math.nan


def treatment_effect(metric, outcomes, treatment, propensity=None, horizon=None, level=None,
                     n_bootstrap=500, seed=0, clip=(0.01, 0.99), n_jobs=1):
    """Point estimate plus bootstrap replicates of a treated-versus-control effect.

    Replicate ``b`` uses substream ``make_rng(seed, b)``; a replicate that
    draws only one arm is redrawn from the same substream.  Replicates whose
    metric is undefined (time-at-risk beyond follow-up, a degenerate hazard
    ratio) are stored as NaN and left out of the summary.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    if metric in ("restricted_mean", "risk_at_time") and horizon is None:
        raise ValueError(f"{metric} needs a horizon")
    if metric == "time_at_risk" and level is None:
        raise ValueError("time_at_risk needs a risk level")
    if n_bootstrap < 1:
        raise ValueError("n_bootstrap must be positive")
    times, events = outcomes_of(outcomes)
    a = np.asarray(treatment).ravel().astype(int)
    if a.min() == a.max():
        raise ValueError("both arms must be present")
    if propensity is None:
        probs, weights = np.ones(a.size), None
    else:
        weights = iptw_weights(a, propensity, clip)
        probs = weights
    point = arm_metric(metric, times, events, a, weights, horizon, level)
    reps = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(b, seed, metric, times, events, a, probs, horizon, level)
        for b in range(n_bootstrap))
    reps = np.asarray(reps, dtype=float)
    info = {"clip": list(clip), "n_undefined": int(np.sum(~np.isfinite(reps)))}
    return EffectEstimate(metric, float(point), reps, int(seed), propensity is not None,
                          horizon, level, info)
