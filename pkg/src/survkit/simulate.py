"""Synthetic cohorts with closed-form ground truth.

Event times are Weibull with a proportional-hazards covariate effect,

    S(t | x) = exp(-(t / scale) ** shape * exp(lin(x)))

and censoring times are exponential with a rate calibrated by bisection so
that the realised censoring fraction hits the target.  Scenarios:

``cox_ph``
    ``lin = x @ beta + quadratic * x0**2``; covariates ``N(covariate_mean, I)``.
``mixture_k``
    ``K`` latent groups with their own Weibull shape/scale; the first two
    covariates carry the group centre (radius ``covariate_signal``), the rest
    are ``N(0, noise_scale**2)`` noise.
``hte_subgroup``
    randomised treatment; ``lin = x @ beta + omega * a * 1{x_j > threshold}``.
``confounded_treatment``
    ``P(a = 1 | x) = expit(-confounding * x0)`` and
    ``lin = confounder_effect * x0 + omega * a``.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import SurvivalDataset
from .numerics import make_rng
from .serialize import atomic_write_text, format_float

SCENARIOS = ("cox_ph", "mixture_k", "hte_subgroup", "confounded_treatment")


class SimulationError(ValueError):
    pass


@dataclass
class SimSpec:
    scenario: str = "cox_ph"
    n: int = 1000
    d: int = 3
    seed: int = 0
    censoring: float = 0.3
    beta: list = None
    shape: float = 1.5
    scale: float = 1.0
    quadratic: float = 0.0
    covariate_mean: object = 0.0
    K: int = 3
    group_shapes: list = None
    group_scales: list = None
    covariate_signal: float = 1.0
    noise_scale: float = 1.0
    omega: float = None
    subgroup_feature: int = 0
    subgroup_threshold: float = 0.0
    treat_prob: float = 0.5
    confounding: float = 1.0
    confounder_effect: float = 1.0

    def __post_init__(self):
        errors = []
        if self.scenario not in SCENARIOS:
            errors.append(f"scenario must be one of {SCENARIOS}")
        if self.n < 1 or self.d < 1:
            errors.append("n and d must be positive")
        if not 0.0 <= self.censoring < 1.0:
            errors.append("censoring must lie in [0, 1)")
        if self.shape <= 0 or self.scale <= 0:
            errors.append("shape and scale must be positive")
        if self.scenario == "mixture_k":
            if self.d < 2:
                errors.append("mixture_k needs d >= 2")
            shapes, scales = self.resolved_groups()
            if len(shapes) != self.K or len(scales) != self.K:
                errors.append("group_shapes and group_scales need K entries")
            if any(v <= 0 for v in list(shapes) + list(scales)):
                errors.append("group shapes and scales must be positive")
        if self.beta is not None and len(self.beta) != self.d:
            errors.append("beta needs d entries")
        if errors:
            raise SimulationError("; ".join(errors))

    def resolved_beta(self):
        if self.beta is not None:
            return np.asarray(self.beta, dtype=float)
        base = {"cox_ph": [0.5, -0.5, 0.0], "hte_subgroup": [0.0, 0.5, -0.5]}.get(self.scenario, [])
        out = np.zeros(self.d)
        out[:min(len(base), self.d)] = base[:self.d]
        return out

    def resolved_omega(self):
        if self.omega is not None:
            return float(self.omega)
        return -1.0 if self.scenario == "hte_subgroup" else 0.0

    def resolved_groups(self):
        shapes = self.group_shapes
        scales = self.group_scales
        if shapes is None:
            shapes = list(np.linspace(0.8, 3.0, self.K)) if self.K > 1 else [self.shape]
        if scales is None:
            scales = list(np.geomspace(0.5, 2.0, self.K)) if self.K > 1 else [self.scale]
        return [float(v) for v in shapes], [float(v) for v in scales]

    def to_dict(self):
        return asdict(self)


@dataclass
class SimTruth:
    spec: SimSpec
    groups: np.ndarray = None  # latent group (mixture_k) or subgroup membership (hte_subgroup)
    propensity: np.ndarray = None
    censoring_rate: float = 0.0
    realized_censoring: float = 0.0
    info: dict = field(default_factory=dict)


def _covariates(spec, rng):
    mean = np.broadcast_to(np.asarray(spec.covariate_mean, dtype=float), (spec.d,))
    return rng.normal(size=(spec.n, spec.d)) + mean


def group_centers(spec):
    angles = 2.0 * np.pi * np.arange(spec.K) / spec.K
    return spec.covariate_signal * np.column_stack([np.cos(angles), np.sin(angles)])


def linear_predictor(spec, X, treatment=None):
    """Log relative hazard of each row (latent group effects excluded)."""
    X = np.asarray(X, dtype=float)
    beta = spec.resolved_beta()
    a = np.zeros(X.shape[0]) if treatment is None else np.asarray(treatment, dtype=float)
    omega = spec.resolved_omega()
    if spec.scenario == "cox_ph":
        return X @ beta + spec.quadratic * X[:, 0] ** 2
    if spec.scenario == "mixture_k":
        return X @ beta
    if spec.scenario == "hte_subgroup":
        inside = X[:, spec.subgroup_feature] > spec.subgroup_threshold
        return X @ beta + omega * a * inside
    return spec.confounder_effect * X[:, 0] + X[:, 1:] @ beta[1:] + omega * a


def weibull_params(spec, groups=None, n=None):
    """Per-row (shape, scale) arrays."""
    if spec.scenario == "mixture_k":
        shapes, scales = spec.resolved_groups()
        return np.asarray(shapes)[groups], np.asarray(scales)[groups]
    return np.full(n, spec.shape), np.full(n, spec.scale)


def true_survival(spec, X, times, treatment=None, groups=None):
    """Closed-form ``S(t | x)`` as an ``(n, len(times))`` matrix.

    ``mixture_k`` needs the latent ``groups``; the other scenarios with a
    treatment need ``treatment`` (defaults to control).
    """
    X = np.asarray(X, dtype=float)
    if spec.scenario == "mixture_k" and groups is None:
        raise ValueError("mixture_k survival depends on the latent group labels")
    shape, scale = weibull_params(spec, groups, X.shape[0])
    lin = linear_predictor(spec, X, treatment)
    t = np.asarray(times, dtype=float)[None, :]
    return np.exp(-np.power(t / scale[:, None], shape[:, None]) * np.exp(lin)[:, None])


def calibrate_censoring(event_times, unit_draws, target, tol=0.02):
    """Rate ``r`` so that ``mean(unit_draws / r <= event_times)`` is within ``tol`` of target."""
    if target == 0:
        return 0.0, 0.0

    def frac(rate):
        return float(np.mean(unit_draws / rate <= event_times))

    ref = 1.0 / float(np.median(event_times))
    lo, hi = ref * 1e-8, ref * 1e8
    if frac(hi) < target - tol:
        raise SimulationError(f"censoring fraction {target} is unattainable (max {frac(hi):.3f})")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-12:
            break
    best = min((lo, hi), key=lambda r: abs(frac(r) - target))
    if abs(frac(best) - target) > tol:
        raise SimulationError(
            f"could not calibrate censoring to {target} (closest {frac(best):.3f})")
    return best, frac(best)


def generate(spec):
    """Draw a cohort; returns ``(SurvivalDataset, SimTruth)``."""
    if isinstance(spec, dict):
        spec = SimSpec(**spec)
    seed = spec.seed
    X = _covariates(spec, make_rng(seed, 0))
    groups = treatment = propensity = None
    if spec.scenario == "mixture_k":
        groups = make_rng(seed, 1).integers(spec.K, size=spec.n)
        noise = make_rng(seed, 1, 1)
        X[:, :2] = group_centers(spec)[groups] + noise.normal(size=(spec.n, 2))
        if spec.d > 2:
            X[:, 2:] = noise.normal(scale=spec.noise_scale, size=(spec.n, spec.d - 2))
    elif spec.scenario == "hte_subgroup":
        propensity = np.full(spec.n, spec.treat_prob)
        treatment = (make_rng(seed, 3).random(spec.n) < propensity).astype(int)
        groups = (X[:, spec.subgroup_feature] > spec.subgroup_threshold).astype(int)
    elif spec.scenario == "confounded_treatment":
        propensity = expit(-spec.confounding * X[:, 0])
        treatment = (make_rng(seed, 3).random(spec.n) < propensity).astype(int)
    shape, scale = weibull_params(spec, groups, spec.n)
    lin = linear_predictor(spec, X, treatment)
    e = make_rng(seed, 2).exponential(size=spec.n)
    t_star = scale * np.power(e * np.exp(-lin), 1.0 / shape)
    unit = make_rng(seed, 4).exponential(size=spec.n)
    rate, realized = calibrate_censoring(t_star, unit, spec.censoring)
    if rate == 0:
        times, events = t_star, np.ones(spec.n, dtype=int)
    else:
        c = unit / rate
        events = (t_star < c).astype(int)
        times = np.minimum(t_star, c)
    names = [f"x{j}" for j in range(spec.d)]
    ds = SurvivalDataset(X, times, events, treatment, None, names)
    truth = SimTruth(spec, groups, propensity, rate, float(1.0 - events.mean()))
    return ds, truth


def csv_text(dataset, truth=None):
    """A cohort as CSV: ``x0..``, ``time``, ``event`` [, ``treatment``][, ``group``]."""
    header = list(dataset.feature_names) + ["time", "event"]
    cols = [dataset.features[:, j] for j in range(dataset.d)] + [dataset.times]
    ints = [dataset.events]
    if dataset.treatment is not None:
        header.append("treatment")
        ints.append(dataset.treatment)
    if truth is not None and truth.groups is not None:
        header.append("group")
        ints.append(truth.groups)
    lines = [",".join(header)]
    for i in range(dataset.n):
        row = [format_float(c[i]) for c in cols] + [str(int(c[i])) for c in ints]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_csv(path, dataset, truth=None):
    atomic_write_text(path, csv_text(dataset, truth))
