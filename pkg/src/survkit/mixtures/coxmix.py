"""Cox mixtures fitted by EM: DCM (base-survival groups only) and CMHE.

The hazard of row ``i`` in base group ``k`` and effect group ``m`` is

    lambda_k(t) * exp(h_k(x_i)) * exp(omega_m) ** a_i

with a Breslow baseline per base group, a softmax gate over ``k`` and a
second softmax gate over ``m``.  DCM is the case ``M = 1``, ``omega = 0``.

E-step density.  Baselines are step functions, so a hazard *density* is
obtained by exponential bridging: on ``(s_{j-1}, s_j]`` between consecutive
training event times the hazard is constant at
``(H(s_j) - H(s_{j-1})) / (s_j - s_{j-1})``, and past the last event time it
keeps the last interval's rate.  The cumulative-hazard term uses the
Breslow step value.  All groups share the knots, so on training data the
common interval widths cancel in the responsibilities and EM is exact for
the discrete-hazard likelihood, whose penalised value never decreases.

Initialisation.  Restart 0 assigns base groups by quantile bins of log
observed time; later restarts use random labels.  Effect groups always
start from random labels.  The restart with the highest penalised
log-likelihood is kept.

M-step.  Responsibility-weighted Cox fits per group (warm-started; the first
one starts from zero so a single group reproduces :func:`cox_fit`), then the
effects ``omega`` (jointly with the Cox heads when they are free), Breslow
baselines, and the two gates by weighted multinomial logistic regression.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..coxph import CoxRiskSets, breslow, cox_objective, default_cox_config
from ..nonparam import StepCurve, curve_eval
from ..numerics import Net, OptimizerConfig, make_rng, minimize

SCHEMA_VERSION = 1
HAZARD_FLOOR = 1e-300


def gate_objective(net, X, targets, weights, lam):
    """Weighted soft-label multinomial cross-entropy plus ridge, per unit weight."""
    scale = 1.0 / weights.sum()
    wt = weights[:, None] * targets

    def fun(theta):
        out, cache = net.forward(theta, X)
        logp = out - logsumexp(out, axis=1, keepdims=True)
        ll = float(np.sum(wt * logp))
        g_out = weights[:, None] * np.exp(logp) * targets.sum(axis=1, keepdims=True) - wt
        pen, g_pen = net.penalty(theta, lam)
        return (pen - ll) * scale, (net.backward(theta, X, cache, g_out) + g_pen) * scale
    return fun


def effect_objective(net, X, risk_sets, a, K, M, lam, total_weight):
    """Joint objective over all Cox heads and the log-effects ``omega``.

    Parameters are ``[theta_1, ..., theta_K, omega]``.  Each risk set in
    ``risk_sets`` describes ``M`` stacked copies of the rows (copy-major).
    """
    p = net.n_params
    scale = 1.0 / total_weight

    def fun(params):
        omega = params[K * p:]
        off = np.kron(omega, a)
        total, grad = 0.0, np.zeros_like(params)
        g_omega = np.zeros(M)
        for k in range(K):
            theta = params[k * p:(k + 1) * p]
            out, cache = net.forward(theta, X)
            ll, g_eta = risk_sets[k].loglik(np.tile(out[:, 0], M) + off)
            g_eta = g_eta.reshape(M, -1)
            pen, g_pen = net.penalty(theta, lam)
            total += pen - ll
            grad[k * p:(k + 1) * p] = -net.backward(theta, X, cache, g_eta.sum(axis=0)[:, None]) + g_pen
            g_omega -= g_eta @ a
        total += 0.5 * lam * float(omega @ omega)
        grad[K * p:] = g_omega + lam * omega
        return total * scale, grad * scale
    return fun


def _bridged_log_hazard(baselines, knots, t):
    """``(n, K)`` log of the piecewise-constant bridged hazard at times ``t``."""
    t = np.asarray(t, dtype=float)
    j = np.minimum(np.searchsorted(knots, t, side="left"), knots.size - 1)
    widths = np.diff(np.concatenate([[0.0], knots]))
    out = np.empty((t.size, len(baselines)))
    for k, base in enumerate(baselines):
        H = np.atleast_1d(curve_eval(base, knots))
        rate = np.diff(np.concatenate([[0.0], H])) / widths
        out[:, k] = np.log(np.maximum(rate[j], HAZARD_FLOOR))
    return out


@dataclass
class CoxMixtureModel:
    """Fitted Cox mixture; see the module docstring for the hazard."""

    K: int
    M: int
    cox_net: Net
    thetas: np.ndarray  # (K, p)
    omega: np.ndarray  # (M,)
    z_net: Net
    z_theta: np.ndarray
    phi_net: Net
    phi_theta: np.ndarray
    baselines: list
    knots: np.ndarray
    l2: float = 0.0
    gate_l2: float = 0.0
    info: dict = field(default_factory=dict)
    train_posterior: np.ndarray = None  # (n, K, M) outcome-conditional responsibilities

    kind = "cox_mixture"

    @staticmethod
    def _X(X):
        X = np.asarray(X, dtype=float)
        return X[None, :] if X.ndim == 1 else X

    def log_hazards(self, X):
        X = self._X(X)
        return np.column_stack([self.cox_net.forward(th, X)[0][:, 0] for th in self.thetas])

    def _log_gate(self, net, theta, X, size):
        if net is None:
            return np.zeros((X.shape[0], size))
        out = net.forward(theta, X)[0]
        return out - logsumexp(out, axis=1, keepdims=True)

    def log_gate_z(self, X):
        return self._log_gate(self.z_net, self.z_theta, self._X(X), self.K)

    def log_gate_phi(self, X):
        return self._log_gate(self.phi_net, self.phi_theta, self._X(X), self.M)

    def predict_latent_z(self, X):
        """Covariate-only gate over base groups (for new data; no outcome used)."""
        return np.exp(self.log_gate_z(X))

    def predict_latent_phi(self, X):
        """Covariate-only gate over treatment-effect groups."""
        return np.exp(self.log_gate_phi(X))

    def log_joint(self, X, times, events, treatment=None):
        """``(n, K, M)`` log of gate times likelihood contribution."""
        X = self._X(X)
        times = np.asarray(times, dtype=float)
        d = np.asarray(events, dtype=float)
        a = np.zeros(times.size) if treatment is None else np.asarray(treatment, dtype=float)
        eta = self.log_hazards(X)
        H = np.column_stack([np.atleast_1d(curve_eval(b, times)) for b in self.baselines])
        lh = _bridged_log_hazard(self.baselines, self.knots, times)
        lin = eta[:, :, None] + self.omega[None, None, :] * a[:, None, None]
        ll = d[:, None, None] * (lh[:, :, None] + lin) - H[:, :, None] * np.exp(lin)
        return self.log_gate_z(X)[:, :, None] + self.log_gate_phi(X)[:, None, :] + ll

    def posterior(self, X, times, events, treatment=None):
        """Outcome-conditional joint responsibilities over (base group, effect group)."""
        lj = self.log_joint(X, times, events, treatment)
        n = lj.shape[0]
        flat = lj.reshape(n, -1)
        return np.exp(flat - logsumexp(flat, axis=1, keepdims=True)).reshape(lj.shape)

    def posterior_z(self, X, times, events, treatment=None):
        return self.posterior(X, times, events, treatment).sum(axis=2)

    def posterior_phi(self, X, times, events, treatment=None):
        return self.posterior(X, times, events, treatment).sum(axis=1)

    def log_likelihood(self, X, times, events, treatment=None, weights=None):
        lj = self.log_joint(X, times, events, treatment)
        row = logsumexp(lj.reshape(lj.shape[0], -1), axis=1)
        w = np.ones(row.size) if weights is None else np.asarray(weights, dtype=float)
        return float(w @ row)

    def predict_survival(self, X, times, treatment=None):
        """Mixture survival; ``treatment`` is a scalar arm or a per-row 0/1 vector."""
        X = self._X(X)
        a = np.zeros(X.shape[0]) if treatment is None else np.broadcast_to(
            np.asarray(treatment, dtype=float), (X.shape[0],))
        H = np.stack([np.atleast_1d(curve_eval(b, np.asarray(times, dtype=float)))
                      for b in self.baselines])  # (K, T)
        pz, pphi = self.predict_latent_z(X), self.predict_latent_phi(X)
        eta = self.log_hazards(X)
        out = np.zeros((X.shape[0], H.shape[1]))
        for k in range(self.K):
            for m in range(self.M):
                rel = np.exp(eta[:, k] + self.omega[m] * a)
                out += (pz[:, k] * pphi[:, m])[:, None] * np.exp(-rel[:, None] * H[k][None, :])
        # gate weights sum to one only up to rounding
        return np.clip(out, 0.0, 1.0)

    def predict_risk(self, X, times, treatment=None):
        return 1.0 - self.predict_survival(X, times, treatment)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION, "model": self.kind, "K": self.K, "M": self.M,
            "cox_net": self.cox_net.config(), "thetas": self.thetas.tolist(),
            "omega": [float(v) for v in self.omega],
            "z_net": None if self.z_net is None else self.z_net.config(),
            "z_theta": None if self.z_theta is None else [float(v) for v in self.z_theta],
            "phi_net": None if self.phi_net is None else self.phi_net.config(),
            "phi_theta": None if self.phi_theta is None else [float(v) for v in self.phi_theta],
            "baselines": [b.to_dict() for b in self.baselines],
            "knots": [float(v) for v in self.knots],
            "l2": self.l2, "gate_l2": self.gate_l2, "info": self.info,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported model schema version")
        opt = lambda cfg: None if cfg is None else Net(**cfg)  # noqa: E731
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(int(d["K"]), int(d["M"]), Net(**d["cox_net"]),
                   np.asarray(d["thetas"], dtype=float).reshape(int(d["K"]), -1),
                   np.asarray(d["omega"], dtype=float), opt(d["z_net"]), arr(d["z_theta"]),
                   opt(d["phi_net"]), arr(d["phi_theta"]),
                   [StepCurve.from_dict(b) for b in d["baselines"]],
                   np.asarray(d["knots"], dtype=float), float(d["l2"]), float(d["gate_l2"]),
                   dict(d.get("info", {})))


class DCMModel(CoxMixtureModel):
    kind = "dcm"


class CMHEModel(CoxMixtureModel):
    kind = "cmhe"

    @property
    def benefit_group(self):
        """Index of the effect group with the most protective treatment effect."""
        return int(np.argmin(self.omega))


# ---------------------------------------------------------------------------
# EM engine

@dataclass
class EMConfig:
    max_iterations: int = 200
    tol: float = 1e-5
    n_init: int = 3
    gate_l2: float = 1e-2
    cox_config: OptimizerConfig = None
    gate_config: OptimizerConfig = None

    def __post_init__(self):
        if self.max_iterations < 1 or self.tol <= 0 or self.n_init < 1 or self.gate_l2 < 0:
            raise ValueError("invalid EM configuration")


class _EMRun:
    """One EM run from one random initialisation."""

    def __init__(self, X, times, events, w, a, K, M, hidden, l2, cfg, free_omega, rng_key, cls):
        self.X, self.times, self.events, self.w, self.a = X, times, events, w, a
        self.K, self.M, self.l2, self.cfg, self.free_omega = K, M, l2, cfg, free_omega
        self.cls = cls
        self.n = times.size
        uniq, inv = np.unique(times, return_inverse=True)
        self.uniq_inv = (uniq, np.tile(inv, M))
        self.knots = np.unique(times[(events == 1) & (w > 0)])
        self.t_rep, self.e_rep = np.tile(times, M), np.tile(events, M)
        self.cox_net = Net(X.shape[1], 1, hidden=hidden, bias=False)
        self.z_net = Net(X.shape[1], K, hidden=hidden, bias=True) if K > 1 else None
        self.phi_net = Net(X.shape[1], M, hidden=hidden, bias=True) if M > 1 else None
        seed, r = rng_key
        init_rng = make_rng(seed, r, 2)
        hid = hidden is not None and self.cox_net.hidden is not None
        self.thetas = np.stack([self.cox_net.init(init_rng if hid else None) for _ in range(K)])
        self.z_theta = None if self.z_net is None else self.z_net.init(make_rng(seed, r, 3) if hid else None)
        self.phi_theta = None if self.phi_net is None else self.phi_net.init(
            make_rng(seed, r, 4) if hid else None)
        self.omega = np.linspace(-0.25, 0.25, M) if (free_omega and M > 1) else np.zeros(M)
        if r == 0:
            # quantile bins of log observed time: groups with different survival
            # separate along it, which random labels would have to discover
            lt = np.log(times)
            zlab = np.searchsorted(np.quantile(lt, np.arange(1, K) / K), lt, side="right")
        else:
            zlab = make_rng(seed, r, 0).integers(K, size=self.n)
        gz = np.eye(K)[zlab]
        gphi = np.eye(M)[make_rng(seed, r, 1).integers(M, size=self.n)]
        self.resp = gz[:, :, None] * gphi[:, None, :]

    def model(self):
        return self.cls(self.K, self.M, self.cox_net, self.thetas.copy(), self.omega.copy(),
                        self.z_net, None if self.z_theta is None else self.z_theta.copy(),
                        self.phi_net, None if self.phi_theta is None else self.phi_theta.copy(),
                        list(self.baselines), self.knots, self.l2, self.cfg.gate_l2)

    def _risk_sets(self):
        # copy-major weights: index m * n + i
        return [CoxRiskSets(self.t_rep, self.e_rep,
                            (self.w[None, :] * self.resp[:, k, :].T).ravel(), self.uniq_inv)
                for k in range(self.K)]

    def m_step(self):
        cox_cfg = self.cfg.cox_config or default_cox_config()
        rs = self._risk_sets()
        off = np.kron(self.omega, self.a) if self.M > 1 or np.any(self.omega != 0) else None
        if self.free_omega:
            params = np.concatenate([self.thetas.ravel(), self.omega])
            fun = effect_objective(self.cox_net, self.X, rs, self.a, self.K, self.M, self.l2,
                                   float(self.w.sum()))
            x = minimize(fun, params, cox_cfg).x
            p = self.cox_net.n_params
            self.thetas = x[:self.K * p].reshape(self.K, p)
            self.omega = x[self.K * p:]
            off = np.kron(self.omega, self.a)
        else:
            for k in range(self.K):
                if rs[k].total_weight <= 0:
                    continue
                fun = cox_objective(self.cox_net, self.X, rs[k], self.l2, off, self.M)
                self.thetas[k] = minimize(fun, self.thetas[k], cox_cfg).x
        self.baselines = []
        for k in range(self.K):
            eta = np.tile(self.cox_net.forward(self.thetas[k], self.X)[0][:, 0], self.M)
            if off is not None:
                eta = eta + off
            self.baselines.append(breslow(self.t_rep, self.e_rep, rs[k].w, eta))
        gate_cfg = self.cfg.gate_config or OptimizerConfig(max_iterations=500, gtol=1e-9)
        if self.z_net is not None:
            fun = gate_objective(self.z_net, self.X, self.resp.sum(axis=2), self.w, self.cfg.gate_l2)
            self.z_theta = minimize(fun, self.z_theta, gate_cfg).x
        if self.phi_net is not None:
            fun = gate_objective(self.phi_net, self.X, self.resp.sum(axis=1), self.w,
                                 self.cfg.gate_l2)
            self.phi_theta = minimize(fun, self.phi_theta, gate_cfg).x

    def penalty(self):
        pen = sum(self.cox_net.penalty(th, self.l2)[0] for th in self.thetas)
        if self.free_omega:
            pen += 0.5 * self.l2 * float(self.omega @ self.omega)
        for net, th in ((self.z_net, self.z_theta), (self.phi_net, self.phi_theta)):
            if net is not None:
                pen += net.penalty(th, self.cfg.gate_l2)[0]
        return pen

    def e_step(self):
        """Update responsibilities; returns (penalised log-likelihood, sup-norm change)."""
        lj = self.model().log_joint(self.X, self.times, self.events, self.a)
        flat = lj.reshape(self.n, -1)
        row = logsumexp(flat, axis=1)
        resp = np.exp(flat - row[:, None]).reshape(lj.shape)
        change = float(np.max(np.abs(resp - self.resp)))
        self.resp = resp
        return float(self.w @ row) - self.penalty(), change

    def run(self):
        history = []
        converged = False
        for it in range(self.cfg.max_iterations):
            self.m_step()
            obj, change = self.e_step()
            history.append(obj)
            if change < self.cfg.tol:
                converged = True
                break
        model = self.model()
        model.info = {"converged": converged, "n_iter": len(history), "objective": history[-1],
                      "history": history}
        model.train_posterior = self.resp
        return model


def _fit_mixture(dataset, K, M, hidden, l2, seed, config, free_omega, weights, cls):
    if K < 1 or M < 1:
        raise ValueError("K and M must be at least 1")
    cfg = config or EMConfig()
    w = dataset.sample_weights() if weights is None else np.asarray(weights, dtype=float)
    if not np.any((dataset.events == 1) & (w > 0)):
        raise ValueError("mixture fitting needs at least one observed event")
    a = np.zeros(dataset.n) if dataset.treatment is None else dataset.treatment.astype(float)
    best = None
    for r in range(cfg.n_init):
        run = _EMRun(dataset.features, dataset.times, dataset.events, w, a, K, M, hidden,
                     float(l2), cfg, free_omega, (seed, r), cls)
        model = run.run()
        model.info["restart"] = r
        if best is None or model.info["objective"] > best.info["objective"]:
            best = model
    return best


def dcm_fit(dataset, K=3, hidden=None, l2=1e-2, seed=0, config=None, weights=None):
    """Deep Cox Mixture by EM with ``K`` latent base-survival groups.

    Training responsibilities (outcome-conditional) are kept on
    ``model.train_posterior``; ``predict_latent_z`` is the covariate gate.
    """
    return _fit_mixture(dataset, K, 1, hidden, l2, seed, config, False, weights, DCMModel)


def cmhe_fit(dataset, K=1, M=2, hidden=None, l2=1e-2, seed=0, config=None, weights=None,
             freeze_omega=False):
    """Cox mixture with heterogeneous treatment effects.

    The log-effects ``omega`` share the Cox ridge penalty ``l2``.  With
    ``freeze_omega`` they stay at zero and the effect groups are inert.
    """
    if dataset.treatment is None:
        raise ValueError("CMHE needs a treatment column")
    if M >= 2 and dataset.treatment.min() == dataset.treatment.max():
        raise ValueError("effect groups are not identifiable from a single treatment arm")
    return _fit_mixture(dataset, K, M, hidden, l2, seed, config, not freeze_omega, weights,
                        CMHEModel)


def dcm_predict_survival(model, X, times):
    return model.predict_survival(X, times)


def cmhe_predict_latent_phi(model, X):
    return model.predict_latent_phi(X)


def mixture_from_dict(d):
    kind = d.get("model")
    cls = {"dcm": DCMModel, "cmhe": CMHEModel}.get(kind)
    if cls is None:
        raise ValueError(f"not a Cox mixture: {kind!r}")
    return cls.from_dict(d)
