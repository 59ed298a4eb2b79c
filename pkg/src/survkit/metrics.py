"""Censoring-adjusted evaluation metrics.

Outcomes are passed as a :class:`SurvivalDataset` or a ``(times, events)``
pair.  The censoring survival function G is always estimated by
Kaplan-Meier on the *training* outcomes; event terms use its left limit
``G(T-)`` and survivor terms ``G(t)``.
"""

import numpy as np

from .nonparam import censoring_km, curve_eval, curve_eval_left, kaplan_meier


class InestimableError(ValueError):
    """The censoring distribution gives zero weight where a weight is needed."""


def outcomes_of(obj):
    if hasattr(obj, "times") and hasattr(obj, "events"):
        return np.asarray(obj.times, dtype=float), np.asarray(obj.events).astype(int)
    if isinstance(obj, dict):
        return np.asarray(obj["time"], dtype=float), np.asarray(obj["event"]).astype(int)
    times, events = obj
    return np.asarray(times, dtype=float).ravel(), np.asarray(events).ravel().astype(int)


def _censoring(train):
    return censoring_km(*outcomes_of(train))


def _inverse_weights(values, horizon, what):
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise InestimableError(
            f"censoring survival is zero at {what} for horizon {horizon:g}; "
            "the metric cannot be estimated beyond the follow-up of the training data")
    return 1.0 / values


def brier_ipcw(train_outcomes, test_outcomes, predictions, t):
    """IPCW Brier score of survival predictions at one or several horizons.

    ``predictions`` has one column per horizon (or is a vector for a scalar
    ``t``).  Returns a float for scalar ``t``, otherwise an array.
    """
    G = _censoring(train_outcomes)
    T, d = outcomes_of(test_outcomes)
    scalar = np.ndim(t) == 0
    horizons = np.atleast_1d(np.asarray(t, dtype=float))
    P = np.asarray(predictions, dtype=float)
    P = P.reshape(-1, 1) if P.ndim == 1 else P
    if P.shape != (T.size, horizons.size):
        raise ValueError("predictions must have one row per test subject and one column per horizon")
    out = np.empty(horizons.size)
    for j, h in enumerate(horizons):
        f = P[:, j]
        case = (T <= h) & (d == 1)
        alive = T > h
        score = np.zeros(T.size)
        if np.any(case):
            w = _inverse_weights(curve_eval_left(G, T[case]), h, "an event time")
            score[case] = f[case] ** 2 * w
        if np.any(alive):
            w = _inverse_weights(curve_eval(G, h), h, "the horizon")
            score[alive] = (1.0 - f[alive]) ** 2 * w
        out[j] = score.mean()
    return float(out[0]) if scalar else out


def integrate_scores(grid, scores):
    """Trapezoid average of per-horizon scores over ``grid``."""
    grid = np.asarray(grid, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if grid.size == 1:
        return float(scores[0])
    if np.any(np.diff(grid) <= 0):
        raise ValueError("the horizon grid must be strictly increasing")
    area = float(np.sum(np.diff(grid) * (scores[1:] + scores[:-1]) / 2.0))
    return area / float(grid[-1] - grid[0])


def integrated_brier(train_outcomes, test_outcomes, predictions, grid, t_max=None):
    """Trapezoidal integral of the IPCW Brier score over ``grid``, divided by its span.

    With ``t_max`` only grid points up to ``t_max`` are used.
    """
    grid = np.asarray(grid, dtype=float)
    P = np.asarray(predictions, dtype=float)
    if t_max is not None:
        keep = grid <= t_max
        grid, P = grid[keep], P[:, keep]
    if grid.size == 0:
        raise ValueError("no horizons at or before t_max")
    return integrate_scores(grid, brier_ipcw(train_outcomes, test_outcomes, P, grid))


def auc_td(train_outcomes, test_outcomes, risks, t):
    """Cumulative/dynamic AUC at horizon ``t`` from risk scores (higher = riskier).

    Cases are events at or before ``t``, weighted by ``1/G(T-)``; controls
    are subjects still at risk after ``t``, unweighted.  The ROC curve sweeps
    every distinct risk value plus minus infinity.
    """
    G = _censoring(train_outcomes)
    T, d = outcomes_of(test_outcomes)
    r = np.asarray(risks, dtype=float).ravel()
    case = (T <= t) & (d == 1)
    ctrl = T > t
    if not np.any(case) or not np.any(ctrl):
        raise ValueError(f"AUC at {t:g} needs at least one case and one control")
    wc = _inverse_weights(curve_eval_left(G, T[case]), t, "an event time")
    rc, rn = r[case], r[ctrl]
    thresholds = np.unique(r)
    # fraction of cases / controls with risk > c, for c = -inf and each distinct value
    oc = np.argsort(rc, kind="stable")
    cw = np.concatenate([[0.0], np.cumsum(wc[oc])])
    below_c = cw[np.searchsorted(rc[oc], thresholds, side="right")]
    tpr = np.concatenate([[1.0], 1.0 - below_c / cw[-1]])
    sn = np.sort(rn)
    tnr = np.concatenate([[0.0], np.searchsorted(sn, thresholds, side="right") / sn.size])
    fpr = 1.0 - tnr
    # points run from (1, 1) to (0, 0) as the threshold increases
    return float(np.sum((fpr[:-1] - fpr[1:]) * (tpr[:-1] + tpr[1:]) / 2.0))


def concordance_td(train_outcomes, test_outcomes, risks, t, chunk=512):
    """Time-dependent concordance with ``1/G(T_i-)^2`` pair weights.

    Comparable pairs have an event for ``i`` at or before ``t`` and
    ``T_i < T_j``; they are concordant when ``risk_i > risk_j``, and equal
    risks count one half.
    """
    G = _censoring(train_outcomes)
    T, d = outcomes_of(test_outcomes)
    r = np.asarray(risks, dtype=float).ravel()
    anchors = np.flatnonzero((d == 1) & (T <= t))
    if anchors.size == 0:
        raise ValueError(f"no events at or before {t:g}: concordance undefined")
    w = _inverse_weights(curve_eval_left(G, T[anchors]), t, "an event time") ** 2
    num = den = 0.0
    for s in range(0, anchors.size, chunk):
        a = anchors[s:s + chunk]
        comparable = T[a][:, None] < T[None, :]
        conc = (r[a][:, None] > r[None, :]) + 0.5 * (r[a][:, None] == r[None, :])
        wa = w[s:s + chunk]
        num += float(wa @ np.sum(comparable * conc, axis=1))
        den += float(wa @ np.sum(comparable, axis=1))
    if den == 0:
        raise ValueError("no comparable pairs")
    return num / den


def phenotype_labels(phenotypes):
    """Hard labels from labels or a probability matrix (argmax, lowest index on ties)."""
    p = np.asarray(phenotypes)
    if p.ndim == 2:
        return np.argmax(p, axis=1)
    return p.ravel()


def phenotype_purity(phenotypes, outcomes, times, strategy="instantaneous",
                     test_phenotypes=None, test_outcomes=None, n_grid=100):
    """Brier score of per-phenotype Kaplan-Meier predictions.

    Each group's KM curve (fitted on ``outcomes``) is the prediction for its
    members; the score pools all members, i.e. the group-size weighted mean
    of per-group scores, with one censoring estimate from all of
    ``outcomes``.  ``strategy='integrated'`` returns for every horizon ``h``
    the integrated score on an evenly spaced grid of ``n_grid`` points from
    the smallest test time to ``h``.  Returns an array, one value per horizon.
    """
    if strategy not in ("instantaneous", "integrated"):
        raise ValueError("strategy must be 'instantaneous' or 'integrated'")
    labels = phenotype_labels(phenotypes)
    T, d = outcomes_of(outcomes)
    if test_outcomes is None:
        test_labels, Tt, dt = labels, T, d
    else:
        test_labels = phenotype_labels(test_phenotypes)
        Tt, dt = outcomes_of(test_outcomes)
    curves = {g: kaplan_meier(T[labels == g], d[labels == g]) for g in np.unique(labels)}
    missing = set(np.unique(test_labels).tolist()) - set(curves)
    if missing:
        raise ValueError(f"test phenotypes {sorted(missing)} have no training members")
    horizons = np.atleast_1d(np.asarray(times, dtype=float))

    def scores(grid):
        P = np.empty((Tt.size, grid.size))
        for g, curve in curves.items():
            P[test_labels == g] = np.atleast_1d(curve_eval(curve, grid))[None, :]
        return brier_ipcw((T, d), (Tt, dt), P, grid)

    if strategy == "instantaneous":
        return scores(horizons)
    out = np.empty(horizons.size)
    for j, h in enumerate(horizons):
        grid = np.linspace(Tt.min(), h, n_grid)
        out[j] = integrate_scores(grid, scores(grid))
    return out


def metric_records(metric, horizons, values):
    """JSON-ready ``{metric, horizon, value}`` records."""
    return [{"metric": metric, "horizon": float(h), "value": float(v)}
            for h, v in zip(np.atleast_1d(horizons), np.atleast_1d(values))]
