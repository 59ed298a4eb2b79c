"""Fixed-size mixtures of parametric survival distributions (DSM-style).

Every component is Weibull or log-normal with covariate-dependent shape and
scale, and a softmax gate weights the components:

    S(t | x) = sum_k pi_k(x) S_k(t | x)

Shapes and scales are ``softplus`` of affine (or one-hidden-layer) outputs.
Internally times are divided by a reference time (median event time) so the
scale heads start near one.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_ndtr, logsumexp, softmax

from ..numerics import Net, OptimizerConfig, make_rng, minimize

SCHEMA_VERSION = 1
TIME_FLOOR = 1e-10
FAMILIES = ("weibull", "lognormal")
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def softplus(a):
    return np.logaddexp(0.0, a)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _component_terms(family, logt, events, shape, scale):
    """Per-row log-likelihood terms and their partial derivatives.

    ``logt`` is log time (in the same unit as ``scale``); arrays broadcast to
    ``(n, K)``.  Returns ``(loglik, d/dshape, d/dscale)``.
    """
    d = events
    if family == "weibull":
        u = logt - np.log(scale)
        z = np.exp(shape * u)
        ll = d * (np.log(shape) - np.log(scale) + (shape - 1.0) * u) - z
        g_shape = d * (1.0 / shape + u) - z * u
        g_scale = shape * (z - d) / scale
    elif family == "lognormal":
        u = (logt - np.log(scale)) / shape
        log_surv = log_ndtr(-u)
        ll = d * (-logt - np.log(shape) - _HALF_LOG_2PI - 0.5 * u * u) + (1.0 - d) * log_surv
        mills = np.exp(-0.5 * u * u - _HALF_LOG_2PI - log_surv)
        g_u = d * (-u) - (1.0 - d) * mills
        g_shape = -d / shape + g_u * (-u / shape)
        g_scale = g_u * (-1.0 / (scale * shape))
    else:
        raise ValueError(f"unknown family {family!r}")
    return ll, g_shape, g_scale


def component_loglik(family, t, event, shape, scale):
    """Log density (event) or log survival (censored) of one component at ``t``."""
    t = np.maximum(np.asarray(t, dtype=float), TIME_FLOOR)
    ll, _, _ = _component_terms(family, np.log(t), np.asarray(event, dtype=float),
                                np.asarray(shape, dtype=float), np.asarray(scale, dtype=float))
    return ll


def component_survival(family, t, shape, scale):
    t = np.maximum(np.asarray(t, dtype=float), TIME_FLOOR)
    if family == "weibull":
        return np.exp(-np.power(t / scale, shape))
    return np.exp(log_ndtr(-(np.log(t) - np.log(scale)) / shape))


def _split(out, K):
    return out[:, :K], out[:, K:2 * K], out[:, 2 * K:3 * K]


def dsm_objective(net, X, times, events, weights, K, family, lam, t_ref):
    """Negative penalised mixture log-likelihood per unit weight, with gradient.

    Times are in units of ``t_ref``; the Jacobian constant is omitted.
    """
    logt = np.log(np.maximum(times, TIME_FLOOR) / t_ref)[:, None]
    ev = events.astype(float)[:, None]
    w = weights
    scale_w = 1.0 / w.sum()

    def fun(theta):
        out, cache = net.forward(theta, X)
        a, b, g = _split(out, K)
        shape, scale = softplus(a), softplus(b)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            ll, g_shape, g_scale = _component_terms(family, logt, ev, shape, scale)
            log_gate = g - logsumexp(g, axis=1, keepdims=True)
            joint = log_gate + ll
            row = logsumexp(joint, axis=1)
            resp = np.exp(joint - row[:, None])
        total = float(w @ row)
        gate = np.exp(log_gate)
        wr = w[:, None] * resp
        grad_out = np.empty_like(out)
        grad_out[:, :K] = -wr * g_shape * expit(a)
        grad_out[:, K:2 * K] = -wr * g_scale * expit(b)
        grad_out[:, 2 * K:] = -w[:, None] * (resp - gate)
        pen, g_pen = net.penalty(theta, lam)
        grad = net.backward(theta, X, cache, grad_out) + g_pen
        return (pen - total) * scale_w, grad * scale_w
    return fun


@dataclass
class DSMModel:
    net: Net
    theta: np.ndarray
    K: int
    family: str
    t_ref: float
    l2: float = 0.0
    info: dict = field(default_factory=dict)

    def _out(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        return _split(self.net.forward(self.theta, X)[0], self.K)

    def components(self, X):
        """``(shape, scale, gate)`` arrays of shape ``(n, K)``; scale in original time units."""
        a, b, g = self._out(X)
        return softplus(a), softplus(b) * self.t_ref, softmax(g, axis=1)

    def predict_survival(self, X, times):
        shape, scale, gate = self.components(X)
        t = np.asarray(times, dtype=float)[None, :, None]
        S = component_survival(self.family, t, shape[:, None, :], scale[:, None, :])
        return np.clip(np.einsum("nmk,nk->nm", S, gate), 0.0, 1.0)

    def predict_risk(self, X, times):
        return 1.0 - self.predict_survival(X, times)

    def predict_latent_z(self, X):
        """Covariate-conditional component probabilities pi(x) (no outcome used)."""
        return self.components(X)[2]

    def posterior_z(self, X, times, events):
        """Outcome-conditional component probabilities given observed (time, event)."""
        shape, scale, gate = self.components(X)
        ll = component_loglik(self.family, np.asarray(times, dtype=float)[:, None],
                              np.asarray(events, dtype=float)[:, None], shape, scale)
        joint = np.log(gate) + ll
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def log_likelihood(self, X, times, events, weights=None):
        """Total (weighted) mixture log-likelihood in original time units."""
        shape, scale, gate = self.components(X)
        ll = component_loglik(self.family, np.asarray(times, dtype=float)[:, None],
                              np.asarray(events, dtype=float)[:, None], shape, scale)
        row = logsumexp(np.log(gate) + ll, axis=1)
        w = np.ones(row.size) if weights is None else np.asarray(weights, dtype=float)
        return float(w @ row)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "model": "dsm", "net": self.net.config(),
                "theta": [float(v) for v in self.theta], "K": self.K, "family": self.family,
                "t_ref": self.t_ref, "l2": self.l2, "info": self.info}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported model schema version")
        return cls(Net(**d["net"]), np.asarray(d["theta"], dtype=float), int(d["K"]), d["family"],
                   float(d["t_ref"]), float(d["l2"]), dict(d.get("info", {})))


def dsm_init(net, K, times, events, t_ref, rng):
    theta = net.init(rng)
    ev_times = times[events == 1] if np.any(events == 1) else times
    qs = np.quantile(ev_times, (np.arange(K) + 0.5) / K) / t_ref
    b = np.zeros(3 * K)
    b[:K] = softplus_inv(1.0)
    b[K:2 * K] = softplus_inv(np.maximum(qs, 1e-6))
    theta[net.slice("b")] = b
    return theta


def dsm_fit(dataset, K=3, family="weibull", hidden=None, l2=1e-2, seed=0, weights=None,
            config=None):
    """Maximise the censored mixture log-likelihood.

    Component scales start at quantiles of the observed event times, shapes
    at one and the gate uniform.  The seed only matters for a hidden layer.
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    if K < 1:
        raise ValueError("K must be at least 1")
    w = dataset.sample_weights() if weights is None else np.asarray(weights, dtype=float)
    times, events = dataset.times, dataset.events
    ev_times = times[events == 1] if np.any(events == 1) else times
    t_ref = float(np.median(ev_times))
    net = Net(dataset.d, 3 * K, hidden=hidden, bias=True)
    theta0 = dsm_init(net, K, times, events, t_ref, make_rng(seed))
    cfg = config or OptimizerConfig(max_iterations=3000, gtol=1e-8)
    fun = dsm_objective(net, dataset.features, times, events, w, K, family, float(l2), t_ref)
    res = minimize(fun, theta0, cfg)
    info = {"converged": res.converged, "n_iter": res.n_iter, "message": res.message,
            "objective": res.fun, "grad_norm": res.grad_norm}
    return DSMModel(net, res.x, int(K), family, t_ref, float(l2), info)


def dsm_predict_survival(model, X, times):
    return model.predict_survival(X, times)


def dsm_predict_latent_z(model, X):
    return model.predict_latent_z(X)
