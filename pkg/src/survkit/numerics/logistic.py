"""Ridge-penalised binary logistic regression."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .optimize import ConvergenceError, OptimizerConfig, minimize


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    l2: float

    def decision_function(self, X):
        return np.asarray(X, dtype=float) @ self.weights + self.intercept

    def predict_proba(self, X):
        return expit(self.decision_function(X))

    def to_dict(self):
        return {"weights": [float(v) for v in self.weights],
                "intercept": float(self.intercept), "l2": float(self.l2)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=float), float(d["intercept"]), float(d["l2"]))


def logistic_objective(X, y, sw, lam):
    def fun(params):
        w, b = params[:-1], params[-1]
        z = X @ w + b
        # -log p(y|x) = -[y log s(z) + (1-y) log s(-z)]
        nll = -np.sum(sw * (y * log_expit(z) + (1.0 - y) * log_expit(-z)))
        r = sw * (expit(z) - y)
        g = np.empty_like(params)
        g[:-1] = X.T @ r + lam * w
        g[-1] = r.sum()
        return nll + 0.5 * lam * (w @ w), g
    return fun


def logistic_fit(X, y, l2=1.0, sample_weight=None, config=None):
    """Maximise the weighted Bernoulli log-likelihood minus ``l2 * |w|^2 / 2``.

    The intercept is not penalised.  Optimisation starts from zero, so the fit
    is deterministic.  With ``l2 == 0`` and separable classes the maximum does
    not exist and :class:`ConvergenceError` is raised.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if n < 2 or y.size != n:
        raise ValueError("need at least two rows with matching labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    if l2 == 0 and (y.min() == y.max()):
        raise ValueError("both classes must be present when l2 == 0")
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    cfg = config or OptimizerConfig(max_iterations=2000, gtol=1e-9)
    fun = logistic_objective(X, y, sw, float(l2))
    res = minimize(fun, np.zeros(X.shape[1] + 1), cfg)
    model = LogisticModel(res.x[:-1].copy(), float(res.x[-1]), float(l2))
    if l2 == 0:
        z = model.decision_function(X)
        separated = np.all((z > 0) == (y == 1))
        if separated and (not res.converged or np.max(np.abs(z)) > 25):
            raise ConvergenceError(
                "classes are perfectly separated; the unpenalised maximum does not "
                "exist - refit with l2 > 0")
    return model


def logistic_predict(model, X):
    return model.predict_proba(X)
