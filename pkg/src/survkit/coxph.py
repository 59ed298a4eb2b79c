"""Weighted Cox proportional hazards regression.

The log relative hazard ``h(x)`` is either linear or a single tanh hidden
layer (no output bias; it is absorbed by the baseline).  Ties use Breslow's
approximation and the baseline cumulative hazard is the weighted Breslow
estimator at the fitted parameters.
"""

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .data import SurvivalDataset
from .nonparam import StepCurve, curve_eval, risk_table
from .numerics import ConvergenceError, Net, OptimizerConfig, make_rng, minimize

SCHEMA_VERSION = 1


class CoxRiskSets:
    """Precomputed risk-set bookkeeping for one (times, events, weights) triple.

    Rows may be replicated copies of an underlying design (mixture models
    expand each row once per latent treatment-effect group).
    """

    def __init__(self, times, events, weights, uniq_inv=None):
        times = np.asarray(times, dtype=float)
        if uniq_inv is None:
            uniq_inv = np.unique(times, return_inverse=True)
        self.uniq, self.inv = uniq_inv
        self.m = self.uniq.size
        self.w = np.asarray(weights, dtype=float)
        self.wd = self.w * (np.asarray(events) == 1)
        self.D = np.bincount(self.inv, weights=self.wd, minlength=self.m)
        self.has_death = self.D > 0
        self.total_weight = float(self.w.sum())

    def loglik(self, eta):
        """Breslow partial log-likelihood and its gradient with respect to ``eta``."""
        c = float(np.max(eta)) if eta.size else 0.0
        r = self.w * np.exp(eta - c)
        s0 = np.cumsum(np.bincount(self.inv, weights=r, minlength=self.m)[::-1])[::-1]
        s0 = np.maximum(s0, 1e-300)
        D = self.D[self.has_death]
        ll = float(self.wd @ eta) - float(D @ (np.log(s0[self.has_death]) + c))
        ratio = np.zeros(self.m)
        ratio[self.has_death] = D / s0[self.has_death]
        grad = self.wd - r * np.cumsum(ratio)[self.inv]
        return ll, grad


def breslow(times, events, weights, eta):
    """Weighted Breslow baseline cumulative hazard at linear predictor ``eta``."""
    w = np.asarray(weights, dtype=float)
    uniq, d, _, s0 = risk_table(times, events, w, w * np.exp(eta))
    jump = d > 0
    return StepCurve(uniq[jump], np.cumsum(d[jump] / s0[jump]), 0.0)


def cox_objective(net, X, risk_sets, lam, offset=None, n_rep=1):
    """Negative penalised partial log-likelihood per unit weight, with gradient.

    With ``n_rep > 1`` the risk sets describe ``n_rep`` stacked copies of the
    rows of ``X`` (copy-major order) and ``offset`` has length ``n_rep * n``.
    """
    scale = 1.0 / max(risk_sets.total_weight, 1e-300)

    def fun(theta):
        out, cache = net.forward(theta, X)
        eta = out[:, 0]
        if n_rep > 1:
            eta = np.tile(eta, n_rep)
        if offset is not None:
            eta = eta + offset
        ll, g_eta = risk_sets.loglik(eta)
        if n_rep > 1:
            g_eta = g_eta.reshape(n_rep, -1).sum(axis=0)
        pen, g_pen = net.penalty(theta, lam)
        grad = -net.backward(theta, X, cache, g_eta[:, None]) + g_pen
        return (pen - ll) * scale, grad * scale
    return fun


def default_cox_config():
    return OptimizerConfig(max_iterations=1000, gtol=1e-10)


@dataclass
class CoxModel:
    net: Net
    theta: np.ndarray
    baseline: StepCurve
    l2: float = 0.0
    n_train: int = 0
    info: dict = field(default_factory=dict)

    @property
    def coef(self):
        """Linear coefficients (only for the linear representation)."""
        if self.net.hidden is not None:
            raise AttributeError("hidden-layer model has no linear coefficients")
        return self.theta.copy()

    def log_hazard(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        return self.net.forward(self.theta, X)[0][:, 0]

    def cumulative_hazard(self, X, times):
        h0 = np.atleast_1d(curve_eval(self.baseline, np.asarray(times, dtype=float)))
        return np.exp(self.log_hazard(X))[:, None] * h0[None, :]

    def predict_survival(self, X, times):
        return np.exp(-self.cumulative_hazard(X, times))

    def predict_risk(self, X, times):
        return 1.0 - self.predict_survival(X, times)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "model": "cox", "net": self.net.config(),
                "theta": [float(v) for v in self.theta], "baseline": self.baseline.to_dict(),
                "l2": self.l2, "n_train": self.n_train, "info": self.info}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported model schema version")
        net = Net(**d["net"])
        return cls(net, np.asarray(d["theta"], dtype=float), StepCurve.from_dict(d["baseline"]),
                   float(d["l2"]), int(d["n_train"]), dict(d.get("info", {})))


def fit_cox_params(net, X, times, events, weights, lam, theta0, config=None, offset=None,
                   n_rep=1, risk_sets=None):
    rs = risk_sets or CoxRiskSets(times, events, weights)
    res = minimize(cox_objective(net, X, rs, lam, offset, n_rep), theta0,
                   config or default_cox_config())
    return res


def cox_fit(dataset, weights=None, l2=0.0, hidden=None, seed=0, config=None):
    """Fit a (weighted) Cox model to a :class:`SurvivalDataset`.

    ``weights`` overrides ``dataset.weights``.  ``hidden`` is the width of an
    optional tanh hidden layer.  Linear fits start from zero; hidden-layer fits
    draw their input weights from ``seed``.
    """
    w = dataset.sample_weights() if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (dataset.n,) or np.any(w < 0):
        raise ValueError("weights must be a non-negative vector of length n")
    if not np.any((dataset.events == 1) & (w > 0)):
        raise ValueError("Cox regression needs at least one observed event")
    net = Net(dataset.d, 1, hidden=hidden, bias=False)
    theta0 = net.init(make_rng(seed) if net.hidden is not None else None)
    X = dataset.features
    res = fit_cox_params(net, X, dataset.times, dataset.events, w, float(l2), theta0, config)
    eta = net.forward(res.x, X)[0][:, 0]
    if l2 == 0 and (np.max(np.abs(res.x), initial=0.0) > 25 or np.ptp(eta) > 60
                    or (not res.converged and res.grad_norm > 1e-5)):
        raise ConvergenceError(
            "partial likelihood appears monotone (coefficients diverge); refit with l2 > 0")
    base = breslow(dataset.times, dataset.events, w, eta)
    info = {"converged": res.converged, "n_iter": res.n_iter, "message": res.message,
            "objective": res.fun, "grad_norm": res.grad_norm}
    return CoxModel(net, res.x, base, float(l2), dataset.n, info)


def cox_predict_survival(model, X, times):
    return model.predict_survival(X, times)


def cox_predict_risk(model, X, times):
    return model.predict_risk(X, times)


# ---------------------------------------------------------------------------
# counterfactual pairs

class ArmTooSmallError(ValueError):
    pass


@dataclass
class CounterfactualPair:
    """Separate outcome models fitted on the treated and control strata."""

    model_treated: object
    model_control: object
    events_treated: int
    events_control: int
    min_events: int = 10

    def model(self, arm):
        if arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        events = self.events_treated if arm == 1 else self.events_control
        if events < self.min_events:
            raise ArmTooSmallError(
                f"arm {arm} has {events} events (< {self.min_events}); its baseline is not usable")
        return self.model_treated if arm == 1 else self.model_control

    def predict_survival(self, X, arm, times):
        return self.model(arm).predict_survival(X, times)

    def to_dict(self):
        return {"model": "counterfactual_pair", "min_events": self.min_events,
                "events_treated": self.events_treated, "events_control": self.events_control,
                "treated": self.model_treated.to_dict(), "control": self.model_control.to_dict()}


def split_arms(dataset):
    if dataset.treatment is None:
        raise ValueError("dataset has no treatment column")
    a = dataset.treatment
    if a.min() == a.max():
        raise ValueError("counterfactual estimation needs both treated and control rows")
    return dataset.subset(np.flatnonzero(a == 1)), dataset.subset(np.flatnonzero(a == 0))


def counterfactual_fit(dataset, fit=None, min_events=10, n_jobs=1, **options):
    """Fit one model per treatment arm.

    ``fit`` is the per-arm fitter (default :func:`cox_fit`); ``options`` are
    passed to it for both arms.
    """
    fit = fit or cox_fit
    treated, control = split_arms(dataset)
    models = Parallel(n_jobs=n_jobs)(delayed(fit)(arm, **options) for arm in (treated, control))
    return CounterfactualPair(models[0], models[1], int(treated.events.sum()),
                              int(control.events.sum()), int(min_events))


def counterfactual_mean_survival(pair, features, arm, times):
    """Average over ``features`` rows of the arm-``arm`` model's predicted survival."""
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return pair.predict_survival(X, arm, times).mean(axis=0)


def as_dataset(X, times, events, weights=None):
    return SurvivalDataset(X, times, events, weights=weights)
