"""Importance weighting under covariate shift, and cross-validated model selection."""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .coxph import CounterfactualPair, CoxModel, cox_fit, split_arms
from .forests import forest_from_dict, rsf_fit
from .metrics import InestimableError, integrated_brier
from .mixtures import DSMModel, cmhe_fit, dcm_fit, dsm_fit, mixture_from_dict
from .numerics import ConvergenceError, OptimizerError, logistic_fit, make_rng, weighted_draw

MODELS = ("cox", "dsm", "dcm", "rsf")
MAX_FOLD_ATTEMPTS = 20


# ---------------------------------------------------------------------------
# covariate shift

def weights_from_probabilities(p, gamma=1.0, clip=(0.01, 0.99)):
    """Tempered odds ``(p / (1 - p)) ** gamma`` with ``p`` clipped."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    p = np.clip(np.asarray(p, dtype=float), clip[0], clip[1])
    return np.power(p / (1.0 - p), gamma)


def domain_classifier(features_source, features_target, l2=1.0):
    """Logistic model of P(target | x) fitted on the stacked, domain-labelled rows."""
    Xs = np.asarray(features_source, dtype=float)
    Xt = np.asarray(features_target, dtype=float)
    y = np.concatenate([np.zeros(Xs.shape[0]), np.ones(Xt.shape[0])])
    return logistic_fit(np.vstack([Xs, Xt]), y, l2=l2)


def importance_weights(features_source, features_target, l2=1.0, gamma=1.0, clip=(0.01, 0.99)):
    """Unnormalised density-ratio weights for the source rows."""
    model = domain_classifier(features_source, features_target, l2)
    return weights_from_probabilities(model.predict_proba(features_source), gamma, clip)


def weighted_resample(dataset, weights, factor=1.0, seed=0):
    """``ceil(factor * n)`` rows drawn with replacement, probability proportional to ``weights``."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    size = int(math.ceil(factor * dataset.n))
    idx = weighted_draw(make_rng(seed), np.asarray(weights, dtype=float), size)
    return dataset.subset(idx).replace(weights=None)


def censoring_gap(dataset_source, dataset_target):
    """Absolute difference of the censored fractions of two cohorts."""
    return abs(float(1.0 - dataset_source.events.mean()) - float(1.0 - dataset_target.events.mean()))


# ---------------------------------------------------------------------------
# model factory

def fit_model(name, dataset, params=None, seed=0, weights=None):
    """Fit one of the supported survival models; all expose ``predict_survival(X, times)``."""
    params = dict(params or {})
    if name == "cox":
        return cox_fit(dataset, weights=weights, seed=seed, **params)
    if name == "dsm":
        return dsm_fit(dataset, seed=seed, weights=weights, **params)
    if name == "dcm":
        return dcm_fit(dataset, seed=seed, weights=weights, **params)
    if name == "rsf":
        if weights is not None:
            raise ValueError("the survival forest does not take case weights; resample instead")
        return rsf_fit(dataset, seed=seed, **params)
    if name == "cmhe":
        return cmhe_fit(dataset, seed=seed, weights=weights, **params)
    raise ValueError(f"model must be one of {MODELS + ('cmhe',)}, got {name!r}")


def model_from_dict(d):
    """Rebuild any fitted model from its ``to_dict`` record."""
    kind = d.get("model")
    if kind == "cox":
        return CoxModel.from_dict(d)
    if kind == "dsm":
        return DSMModel.from_dict(d)
    if kind in ("dcm", "cmhe"):
        return mixture_from_dict(d)
    if kind in ("rsf", "regforest"):
        return forest_from_dict(d)
    raise ValueError(f"unknown model record {kind!r}")


def expand_grid(grid):
    """Configurations in ``itertools.product`` order over the keys as given."""
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


# ---------------------------------------------------------------------------
# cross-validation

def stratified_folds(events, n_folds, seed):
    """Fold index per row, balanced within the event and censored strata.

    Attempt ``r`` shuffles with ``make_rng(seed, r)``; attempts repeat until
    every fold holds an event and every training split too.
    """
    events = np.asarray(events)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if events.size < n_folds:
        raise ValueError("more folds than rows")
    for attempt in range(MAX_FOLD_ATTEMPTS):
        rng = make_rng(seed, attempt)
        folds = np.empty(events.size, dtype=int)
        offset = 0
        for stratum in (1, 0):
            rows = np.flatnonzero(events == stratum)
            rows = rows[rng.permutation(rows.size)]
            folds[rows] = (offset + np.arange(rows.size)) % n_folds
            offset = (offset + rows.size) % n_folds
        ok = all(np.any(events[folds == f] == 1) and np.any(events[folds != f] == 1)
                 for f in range(n_folds))
        if ok:
            return folds
    raise ValueError("could not place an event in every fold; use fewer folds")


def default_horizons(dataset, n=10):
    ev = dataset.times[dataset.events == 1]
    return np.unique(np.quantile(ev, np.linspace(0.1, 0.75, n)))


def _fold_score(name, params, dataset, folds, f, horizons, seed):
    train = dataset.subset(np.flatnonzero(folds != f))
    test = dataset.subset(np.flatnonzero(folds == f))
    try:
        model = fit_model(name, train, params, seed, train.weights)
        P = model.predict_survival(test.features, horizons)
        return integrated_brier(train, test, P, horizons), None
    except (ConvergenceError, OptimizerError, InestimableError, ValueError) as exc:
        return math.nan, f"{type(exc).__name__}: {exc}"


@dataclass
class CVReport:
    model: str
    configs: list
    scores: np.ndarray  # (n_configs, n_folds)
    folds: np.ndarray
    horizons: np.ndarray
    seed: int
    final_model: object = None
    errors: dict = field(default_factory=dict)

    @property
    def mean_scores(self):
        s = np.where(np.isfinite(self.scores), self.scores, np.inf)
        return s.mean(axis=1)

    @property
    def selected_index(self):
        return int(np.argmin(self.mean_scores))

    @property
    def selected(self):
        return self.configs[self.selected_index]

    def to_dict(self, include_model=True):
        out = {"model": self.model, "seed": self.seed, "configs": self.configs,
               "scores": self.scores.tolist(), "mean_scores": self.mean_scores.tolist(),
               "selected_index": self.selected_index, "selected": self.selected,
               "folds": self.folds.tolist(), "horizons": self.horizons.tolist(),
               "errors": self.errors}
        if include_model and self.final_model is not None:
            out["final_model"] = self.final_model.to_dict()
        return out


def survival_regression_cv(model, grid, dataset, n_folds=5, horizons=None, seed=0, n_jobs=1,
                           refit=True):
    """Pick the configuration with the lowest mean out-of-fold integrated Brier score.

    Folds are stratified by the event indicator.  Fits that fail score
    ``inf``; ties keep the earliest configuration.  The winner is refit on
    all rows (with the dataset's weights, if any).
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    configs = expand_grid(grid)
    folds = stratified_folds(dataset.events, n_folds, seed)
    horizons = default_horizons(dataset) if horizons is None else np.asarray(horizons, dtype=float)
    tasks = [(c, f) for c in range(len(configs)) for f in range(n_folds)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fold_score)(model, configs[c], dataset, folds, f, horizons, seed) for c, f in tasks)
    scores = np.full((len(configs), n_folds), np.nan)
    errors = {}
    for (c, f), (score, err) in zip(tasks, results):
        scores[c, f] = score
        if err is not None:
            errors[f"{c},{f}"] = err
    report = CVReport(model, configs, scores, folds, horizons, int(seed), None, errors)
    if not np.isfinite(report.mean_scores[report.selected_index]):
        raise ValueError("every configuration failed in at least one fold")
    if refit:
        report.final_model = fit_model(model, dataset, report.selected, seed, dataset.weights)
    return report


def counterfactual_cv(model, grid, dataset, n_folds=5, horizons=None, seed=0, n_jobs=1,
                      min_events=10):
    """Independent CV within each treatment arm; returns ``(treated, control, pair)``."""
    treated, control = split_arms(dataset)
    rep_t = survival_regression_cv(model, grid, treated, n_folds, horizons, seed, n_jobs)
    rep_c = survival_regression_cv(model, grid, control, n_folds, horizons, seed, n_jobs)
    pair = CounterfactualPair(rep_t.final_model, rep_c.final_model, int(treated.events.sum()),
                              int(control.events.sum()), int(min_events))
    return rep_t, rep_c, pair
