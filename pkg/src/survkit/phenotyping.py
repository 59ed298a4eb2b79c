"""Phenotypers: intersectional, clustering, supervised (latent) and Virtual Twins.

Each returns a :class:`PhenotypeAssignment`: a row-stochastic probability
matrix, argmax labels (lowest index on ties) and one descriptor per group.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .coxph import counterfactual_fit, cox_fit
from .data import DataValidationError, RawTable
from .forests import regforest_fit
from .numerics import gmm_fit, kmeans, pca_fit
from .serialize import atomic_write_text, format_float
from .treatment import treatment_effect

DISTANCE_FLOOR = 1e-12


@dataclass
class PhenotypeAssignment:
    probabilities: np.ndarray
    descriptors: list
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.asarray(self.probabilities, dtype=float)
        if P.ndim != 2 or P.shape[1] != len(self.descriptors):
            raise ValueError("probabilities need one column per descriptor")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("phenotype probabilities must be non-negative rows summing to 1")
        self.probabilities = P

    @property
    def labels(self):
        return np.argmax(self.probabilities, axis=1)

    @property
    def K(self):
        return self.probabilities.shape[1]

    def sizes(self):
        return np.bincount(self.labels, minlength=self.K)

    def to_csv(self, path=None):
        header = ["row", "label"] + [f"p{k}" for k in range(self.K)]
        lines = [",".join(header)]
        for i, (lab, row) in enumerate(zip(self.labels, self.probabilities)):
            lines.append(",".join([str(i), str(int(lab))] + [format_float(v) for v in row]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            atomic_write_text(path, text)
        return text

    def groups_record(self):
        sizes = self.sizes()
        return {"K": self.K,
                "groups": [{"index": k, "name": name, "size": int(sizes[k])}
                           for k, name in enumerate(self.descriptors)],
                "info": self.info}


def _one_hot(labels, K):
    P = np.zeros((labels.size, K))
    P[np.arange(labels.size), labels] = 1.0
    return P


# ---------------------------------------------------------------------------
# intersectional

def _column(table, name):
    if isinstance(table, RawTable):
        col = table[name]
        if np.any(col.missing):
            raise DataValidationError(f"column {name!r} has missing values")
        return col.values
    return np.asarray(table[name])


def _quantile_label(q):
    return f"q{100 * q:g}"


def intersectional_phenotype(table, cat_vars=(), num_vars=(), quantiles=(0.0, 0.5, 1.0)):
    """Groups from all combinations of categorical levels and numeric quantile bins.

    Bins are ``[q_i, q_{i+1})`` with the last one closed at the maximum.
    Combinations without members are dropped.
    """
    if not cat_vars and not num_vars:
        raise ValueError("need at least one categorical or numeric variable")
    quantiles = sorted(float(q) for q in quantiles)
    if len(quantiles) < 2 or quantiles[0] < 0 or quantiles[-1] > 1:
        raise ValueError("quantiles must hold at least two values in [0, 1]")
    codes, names, edges_info = [], [], {}
    for name in cat_vars:
        vals = np.array([str(v) for v in _column(table, name)], dtype=object)
        levels = sorted(set(vals))
        index = {lvl: j for j, lvl in enumerate(levels)}
        codes.append(np.array([index[v] for v in vals]))
        names.append([f"{name}={lvl}" for lvl in levels])
    for name in num_vars:
        x = np.asarray(_column(table, name), dtype=float)
        edges = np.quantile(x, quantiles)
        keep = np.concatenate([[True], np.diff(edges) > 0])
        edges, qs = edges[keep], [q for q, k in zip(quantiles, keep) if k]
        if edges.size < 2:
            edges, qs = np.array([edges[0], edges[0]]), [quantiles[0], quantiles[-1]]
        nbins = edges.size - 1
        codes.append(np.clip(np.searchsorted(edges, x, side="right") - 1, 0, nbins - 1))
        labels = []
        for b in range(nbins):
            close = "]" if b == nbins - 1 else ")"
            labels.append(f"{name}∈[{_quantile_label(qs[b])},{_quantile_label(qs[b + 1])}{close}")
        names.append(labels)
        edges_info[name] = [float(e) for e in edges]
    shape = [len(n) for n in names]
    flat = np.ravel_multi_index(codes, shape)
    present = np.unique(flat)
    labels = np.searchsorted(present, flat)
    descriptors = []
    for code in present:
        parts = np.unravel_index(code, shape)
        descriptors.append(" & ".join(names[v][int(p)] for v, p in enumerate(parts)))
    return PhenotypeAssignment(_one_hot(labels, present.size), descriptors,
                               {"phenotyper": "intersectional", "bin_edges": edges_info})


# ---------------------------------------------------------------------------
# clustering

def membership_probabilities(distances, mode="inverse_distance"):
    """Turn cluster distances into membership probabilities.

    ``literal`` normalises the distances themselves, so more distant clusters
    get *more* mass; ``inverse_distance`` normalises ``1/d`` (floored).
    """
    D = np.asarray(distances, dtype=float)
    if D.shape[1] == 1:
        return np.ones_like(D)
    if mode == "literal":
        total = D.sum(axis=1, keepdims=True)
        return np.where(total > 0, D / np.where(total > 0, total, 1.0), 1.0 / D.shape[1])
    if mode == "inverse_distance":
        inv = 1.0 / np.maximum(D, DISTANCE_FLOOR)
        return inv / inv.sum(axis=1, keepdims=True)
    raise ValueError("membership must be 'literal' or 'inverse_distance'")


@dataclass
class ClusteringPhenotyper:
    clustering: object
    pca: object = None
    membership: str = "inverse_distance"

    def predict_proba(self, X):
        Z = np.asarray(X, dtype=float)
        if self.pca is not None:
            Z = self.pca.transform(Z)
        return membership_probabilities(self.clustering.distances(Z), self.membership)

    def assign(self, X):
        K = self.clustering.means.shape[0]
        return PhenotypeAssignment(self.predict_proba(X), [f"cluster {k}" for k in range(K)],
                                   {"phenotyper": "clustering", "method": self.clustering.method,
                                    "membership": self.membership})


def fit_clustering_phenotyper(features, K=3, clusterer="kmeans", dim_red=None, n_components=2,
                              membership="inverse_distance", seed=0):
    X = np.asarray(features, dtype=float)
    pca = None
    if dim_red == "pca":
        pca = pca_fit(X, n_components)
        X = pca.transform(X)
    elif dim_red not in (None, "none"):
        raise ValueError("dim_red must be None or 'pca'")
    if clusterer == "kmeans":
        state = kmeans(X, K, seed=seed)
    elif clusterer == "gmm":
        state = gmm_fit(X, K, seed=seed)
    else:
        raise ValueError("clusterer must be 'kmeans' or 'gmm'")
    membership_probabilities(np.ones((1, 2)), membership)
    return ClusteringPhenotyper(state, pca, membership)


def clustering_phenotype(features, K=3, clusterer="kmeans", dim_red=None, n_components=2,
                         membership="inverse_distance", seed=0):
    """Unsupervised phenotypes from (optionally PCA-reduced) covariate clusters.

    Distances are Euclidean for k-means and diagonal Mahalanobis for a GMM.
    """
    phen = fit_clustering_phenotyper(features, K, clusterer, dim_red, n_components, membership,
                                     seed)
    return phen.assign(features)


# ---------------------------------------------------------------------------
# supervised

def supervised_phenotype(model, features):
    """Phenotypes from a fitted mixture's covariate-conditional latent distribution."""
    P = model.predict_latent_z(features)
    return PhenotypeAssignment(P, [f"component {k}" for k in range(P.shape[1])],
                               {"phenotyper": "supervised", "model": type(model).__name__})


# ---------------------------------------------------------------------------
# Virtual Twins

def rmst_from_model(model, X, horizon):
    """Per-row area under a step-valued predicted survival curve on ``[0, horizon]``."""
    base = model.baseline.jump_times
    knots = base[base < horizon]
    edges = np.concatenate([[0.0], knots, [float(horizon)]])
    S = model.predict_survival(X, edges[:-1])
    return S @ np.diff(edges)


@dataclass
class VirtualTwins:
    pair: object
    forest: object
    horizon: float
    threshold: float = 0.0

    def effects(self, X):
        """Counterfactual RMST difference (treated minus control) per row."""
        return (rmst_from_model(self.pair.model(1), X, self.horizon)
                - rmst_from_model(self.pair.model(0), X, self.horizon))

    def benefit_probability(self, X):
        """Fraction of trees predicting an effect above the threshold (ties count half)."""
        votes = self.forest.predict_trees(X)
        return (np.sum(votes > self.threshold, axis=0)
                + 0.5 * np.sum(votes == self.threshold, axis=0)) / votes.shape[0]

    def assign(self, X):
        p = self.benefit_probability(X)
        return PhenotypeAssignment(np.column_stack([1.0 - p, p]), ["no benefit", "benefit"],
                                   {"phenotyper": "virtual_twins", "horizon": self.horizon,
                                    "threshold": self.threshold})


def virtual_twins(dataset, horizon, cox_options=None, forest_options=None, seed=0,
                  threshold="ate", min_events=10, n_jobs=1):
    """Two-stage counterfactual phenotyping.

    Per-arm Cox models (one tanh hidden layer by default) give each row's
    RMST under treatment and control; a regression forest smooths the
    difference.  A row is labelled 1 (benefit) when more than half of the
    trees put its difference above ``threshold``.  ``threshold='ate'`` uses
    the mean estimated difference, so "benefit" means more than the average
    effect; a number (e.g. ``0.0``) is used as given.
    """
    if dataset.treatment is None or dataset.treatment.min() == dataset.treatment.max():
        raise ValueError("Virtual Twins needs both treated and control rows")
    opts = {"hidden": 8, "l2": 1.0, "seed": seed}
    opts.update(cox_options or {})
    pair = counterfactual_fit(dataset, cox_fit, min_events=min_events, n_jobs=n_jobs, **opts)
    vt = VirtualTwins(pair, None, float(horizon))
    delta = vt.effects(dataset.features)
    vt.threshold = float(delta.mean()) if threshold == "ate" else float(threshold)
    fopts = {"n_trees": 100, "min_leaf": 20}
    fopts.update(forest_options or {})
    vt.forest = regforest_fit(dataset.features, delta, seed=seed, n_jobs=n_jobs, **fopts)
    out = vt.assign(dataset.features)
    out.info["mean_effect"] = float(delta.mean())
    out.model = vt
    return out


# ---------------------------------------------------------------------------
# post-hoc objective report

def phenotype_effect_report(assignment, dataset, metric="restricted_mean", horizon=None,
                            level=None, alpha=None, n_bootstrap=200, seed=0, propensity=None):
    """Within-group treatment effect and group mass for every phenotype.

    ``alpha`` is a minimum group mass: groups below it are flagged, not dropped.
    """
    if dataset.treatment is None:
        raise ValueError("the effect report needs a treatment column")
    labels = assignment.labels
    groups = []
    for k, name in enumerate(assignment.descriptors):
        rows = np.flatnonzero(labels == k)
        mass = rows.size / labels.size
        rec = {"index": k, "name": name, "mass": mass,
               "meets_size": None if alpha is None else bool(mass >= alpha)}
        arms = dataset.treatment[rows]
        if rows.size and arms.min() != arms.max():
            est = treatment_effect(metric, (dataset.times[rows], dataset.events[rows]), arms,
                                   None if propensity is None else np.asarray(propensity)[rows],
                                   horizon, level, n_bootstrap, seed)
            rec["effect"] = est.point
            rec["summary"] = est.summary
        else:
            rec["effect"] = math.nan
            rec["summary"] = None
        groups.append(rec)
    return {"metric": metric, "horizon": horizon, "level": level, "alpha": alpha, "groups": groups}
