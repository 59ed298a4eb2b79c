"""Random survival forests (log-rank splitting) and regression forests.

Rows are put into a canonical order before anything random happens, so a
fitted forest does not depend on the order of the training rows.  Tree ``b``
draws its bootstrap sample and its per-node feature subsets from its own
substream ``make_rng(seed, b)``; parallel and serial fits are identical.
A bootstrap sample is represented by per-row multiplicities used as weights.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .nonparam import StepCurve, curve_eval, nelson_aalen
from .numerics import make_rng

SCHEMA_VERSION = 1


def n_candidate_features(max_features, d):
    if max_features in (None, "all"):
        return d
    if max_features == "sqrt":
        return max(1, int(math.sqrt(d)))
    if max_features == "log2":
        return max(1, int(math.log2(d))) if d > 1 else 1
    if isinstance(max_features, (int, np.integer)) and 1 <= max_features:
        return min(int(max_features), d)
    raise ValueError(f"max_features must be 'sqrt', 'log2', 'all' or a positive int, got {max_features!r}")


def canonical_order(X, *columns):
    """Row permutation sorting lexicographically by the columns of ``X`` then ``columns``."""
    keys = [np.asarray(c) for c in reversed(columns)] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    if not keys:
        return np.arange(X.shape[0])
    return np.lexsort(keys)


def logrank_statistic(times, events, group, weights=None):
    """Two-sample log-rank chi-square statistic (group 1 versus group 0)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events) == 1
    group = np.asarray(group) == 1
    w = np.ones(times.size) if weights is None else np.asarray(weights, dtype=float)
    tau = np.unique(times[events & (w > 0)])
    at_risk = times[:, None] >= tau[None, :]
    dies = events[:, None] & (times[:, None] == tau[None, :])
    N = w @ at_risk
    D = w @ dies
    N1 = (w * group) @ at_risk
    D1 = (w * group) @ dies
    return _logrank_from_counts(N1, D1, N, D)


def _logrank_from_counts(N1, D1, N, D):
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = N1 / N
        num = np.sum(D1 - frac * D, axis=-1)
        var_terms = np.where(N > 1, frac * (1.0 - frac) * D * (N - D) / (N - 1.0), 0.0)
    var = np.sum(var_terms, axis=-1)
    return np.where(var > 0, num * num / np.where(var > 0, var, 1.0), 0.0)


def _midpoint(lo, hi):
    mid = 0.5 * (lo + hi)
    return np.where(mid < hi, mid, lo)


# ---------------------------------------------------------------------------
# tree storage

@dataclass
class Tree:
    """Flat binary tree; ``feature[i] < 0`` marks a leaf whose value is ``leaf[i]``.

    Rows with ``x[feature] <= threshold`` go left.
    """

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    leaf: list = field(default_factory=list)

    def add(self):
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1),
                       (self.right, -1), (self.leaf, None)):
            lst.append(v)
        return len(self.feature) - 1

    def apply(self, X):
        """Leaf index reached by each row of ``X``."""
        X = np.asarray(X, dtype=float)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold, dtype=float)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=int)
        active = feature[node] >= 0
        while np.any(active):
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, feature[nd]] <= threshold[nd]
            node[idx] = np.where(go_left, left[nd], right[nd])
            active = feature[node] >= 0
        return node

    @property
    def depth(self):
        depth = {0: 0}
        for i, f in enumerate(self.feature):
            if f >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return max(depth.values())

    def to_nested(self, encode_leaf, i=0):
        if self.feature[i] < 0:
            return {"leaf": encode_leaf(self.leaf[i])}
        return {"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                "left": self.to_nested(encode_leaf, self.left[i]),
                "right": self.to_nested(encode_leaf, self.right[i])}

    @classmethod
    def from_nested(cls, rec, decode_leaf):
        tree = cls()
        stack = [(rec, None, None)]
        while stack:
            node, parent, side = stack.pop()
            i = tree.add()
            if parent is not None:
                (tree.left if side == "left" else tree.right)[parent] = i
            if "leaf" in node:
                tree.leaf[i] = decode_leaf(node["leaf"])
            else:
                tree.feature[i] = int(node["feature"])
                tree.threshold[i] = float(node["threshold"])
                stack.append((node["right"], i, "right"))
                stack.append((node["left"], i, "left"))
        return tree


def _grow(rows0, d, rng, max_depth, max_features, best_split, make_leaf):
    """Depth-first growth from rows ``rows0`` with an explicit stack (left child first)."""
    tree = Tree()
    k = n_candidate_features(max_features, d)
    stack = [(rows0, 0, tree.add())]
    while stack:
        rows, depth, node = stack.pop()
        split = None
        if max_depth is None or depth < max_depth:
            feats = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)
            split = best_split(rows, feats)
        if split is None:
            tree.leaf[node] = make_leaf(rows)
            continue
        f, thr, go_left = split
        tree.feature[node], tree.threshold[node] = int(f), float(thr)
        left_id, right_id = tree.add(), tree.add()
        tree.left[node], tree.right[node] = left_id, right_id
        stack.append((rows[~go_left], depth + 1, right_id))
        stack.append((rows[go_left], depth + 1, left_id))
    return tree


# ---------------------------------------------------------------------------
# survival forest

def _survival_split(X, times, events, w, min_leaf_events):
    def best_split(rows, feats):
        t, ev, wr = times[rows], events[rows] == 1, w[rows]
        wd = wr * ev
        if wd.sum() < 2 * min_leaf_events or rows.size < 2:
            return None
        tau = np.unique(t[ev])
        A = wr[:, None] * (t[:, None] >= tau[None, :])
        B = wd[:, None] * (t[:, None] == tau[None, :])
        N, D = A.sum(axis=0), B.sum(axis=0)
        best = None
        for f in feats:
            x = X[rows, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            cand = np.flatnonzero(xs[1:] > xs[:-1])
            if cand.size == 0:
                continue
            left_ev = np.cumsum(wd[order])[cand]
            ok = (left_ev >= min_leaf_events) & (wd.sum() - left_ev >= min_leaf_events)
            if not np.any(ok):
                continue
            cand = cand[ok]
            N1 = np.cumsum(A[order], axis=0)[cand]
            D1 = np.cumsum(B[order], axis=0)[cand]
            stat = _logrank_from_counts(N1, D1, N[None, :], D[None, :])
            j = int(np.argmax(stat))
            if stat[j] > 0 and (best is None or stat[j] > best[0]):
                p = cand[j]
                best = (float(stat[j]), f, float(_midpoint(xs[p], xs[p + 1])))
        if best is None:
            return None
        _, f, thr = best
        return f, thr, X[rows, f] <= thr

    return best_split


@dataclass
class SurvivalForest:
    trees: list
    params: dict

    def cumulative_hazard(self, X, times):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        times = np.asarray(times, dtype=float)
        total = np.zeros((X.shape[0], times.size))
        for tree in self.trees:
            leaves = tree.apply(X)
            for leaf in np.unique(leaves):
                total[leaves == leaf] += np.atleast_1d(curve_eval(tree.leaf[leaf], times))
        return total / len(self.trees)

    def predict_survival(self, X, times):
        return np.exp(-self.cumulative_hazard(X, times))

    def predict_risk(self, X, times):
        return 1.0 - self.predict_survival(X, times)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "model": "rsf", "params": self.params,
                "trees": [t.to_nested(lambda c: c.to_dict()) for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported model schema version")
        return cls([Tree.from_nested(t, StepCurve.from_dict) for t in d["trees"]], dict(d["params"]))


def _bootstrap_counts(rng, n, bootstrap):
    if not bootstrap:
        return np.ones(n)
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)


def _survival_tree(X, times, events, b, seed, max_depth, min_leaf_events, max_features,
                   bootstrap):
    rng = make_rng(seed, b)
    w = _bootstrap_counts(rng, times.size, bootstrap)
    split = _survival_split(X, times, events, w, min_leaf_events)

    def leaf(rows):
        # bootstrap multiplicities are integers: replicate rows rather than weight them
        reps = w[rows].astype(int)
        return nelson_aalen(np.repeat(times[rows], reps), np.repeat(events[rows], reps))

    return _grow(np.flatnonzero(w > 0), X.shape[1], rng, max_depth, max_features, split, leaf)


def rsf_fit(dataset, n_trees=100, max_depth=None, min_leaf_events=3, max_features="sqrt",
            seed=0, bootstrap=True, n_jobs=1):
    """Random survival forest with log-rank splits and Nelson-Aalen leaves.

    A split is admissible when each child keeps at least ``min_leaf_events``
    (bootstrap-weighted) events.  Equal statistics keep the lowest feature
    index and the lowest threshold.
    """
    if not np.any(dataset.events == 1):
        raise ValueError("a survival forest needs at least one observed event")
    if n_trees < 1 or min_leaf_events < 1:
        raise ValueError("n_trees and min_leaf_events must be positive")
    n_candidate_features(max_features, dataset.d)
    order = canonical_order(dataset.features, dataset.times, dataset.events)
    X, t, e = dataset.features[order], dataset.times[order], dataset.events[order]
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_survival_tree)(X, t, e, b, seed, max_depth, min_leaf_events, max_features,
                                bootstrap)
        for b in range(n_trees))
    params = {"n_trees": n_trees, "max_depth": max_depth, "min_leaf_events": min_leaf_events,
              "max_features": max_features, "seed": seed, "bootstrap": bootstrap}
    return SurvivalForest(list(trees), params)


def rsf_predict_survival(forest, X, times):
    return forest.predict_survival(X, times)


# ---------------------------------------------------------------------------
# regression forest

def _regression_split(X, y, w, min_leaf):
    def best_split(rows, feats):
        yr, wr = y[rows], w[rows]
        if rows.size < 2 or np.all(yr == yr[0]) or wr.sum() < 2 * min_leaf:
            return None
        W, S1 = wr.sum(), wr @ yr
        parent = float(wr @ (yr * yr)) - S1 * S1 / W
        best = None
        for f in feats:
            x = X[rows, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            cand = np.flatnonzero(xs[1:] > xs[:-1])
            if cand.size == 0:
                continue
            cw = np.cumsum(wr[order])[cand]
            ok = (cw >= min_leaf) & (W - cw >= min_leaf)
            if not np.any(ok):
                continue
            cand, cw = cand[ok], cw[ok]
            c1 = np.cumsum((wr * yr)[order])[cand]
            c2 = np.cumsum((wr * yr * yr)[order])[cand]
            sse = (c2 - c1 * c1 / cw) + ((wr @ (yr * yr)) - c2 - (S1 - c1) ** 2 / (W - cw))
            gain = parent - sse
            j = int(np.argmax(gain))
            if gain[j] > 0 and (best is None or gain[j] > best[0]):
                p = cand[j]
                best = (float(gain[j]), f, float(_midpoint(xs[p], xs[p + 1])))
        if best is None:
            return None
        _, f, thr = best
        return f, thr, X[rows, f] <= thr

    return best_split


def _regression_tree(X, y, b, seed, max_depth, min_leaf, max_features, bootstrap):
    rng = make_rng(seed, b)
    w = _bootstrap_counts(rng, y.size, bootstrap)

    def leaf(rows):
        yr = y[rows]
        if np.all(yr == yr[0]):
            return float(yr[0])
        return float(w[rows] @ yr / w[rows].sum())

    return _grow(np.flatnonzero(w > 0), X.shape[1], rng, max_depth, max_features,
                 _regression_split(X, y, w, min_leaf), leaf)


@dataclass
class RegressionForest:
    trees: list
    params: dict

    def predict_trees(self, X):
        """``(n_trees, n)`` per-tree predictions."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        out = np.empty((len(self.trees), X.shape[0]))
        for b, tree in enumerate(self.trees):
            out[b] = np.asarray(tree.leaf, dtype=object)[tree.apply(X)].astype(float)
        return out

    def predict(self, X):
        return self.predict_trees(X).mean(axis=0)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "model": "regforest", "params": self.params,
                "trees": [t.to_nested(float) for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported model schema version")
        return cls([Tree.from_nested(t, float) for t in d["trees"]], dict(d["params"]))


def regforest_fit(X, y, n_trees=100, max_depth=None, min_leaf=5, max_features="all", seed=0,
                  bootstrap=True, n_jobs=1):
    """Bagged CART regression trees with squared-error splits."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size or y.size == 0:
        raise ValueError("X and y must have the same, non-zero number of rows")
    if n_trees < 1 or min_leaf < 1:
        raise ValueError("n_trees and min_leaf must be positive")
    n_candidate_features(max_features, X.shape[1])
    order = canonical_order(X, y)
    Xs, ys = X[order], y[order]
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_regression_tree)(Xs, ys, b, seed, max_depth, min_leaf, max_features, bootstrap)
        for b in range(n_trees))
    params = {"n_trees": n_trees, "max_depth": max_depth, "min_leaf": min_leaf,
              "max_features": max_features, "seed": seed, "bootstrap": bootstrap}
    return RegressionForest(list(trees), params)


def regforest_predict(forest, X):
    return forest.predict(X)


def forest_from_dict(d):
    kind = d.get("model")
    if kind == "rsf":
        return SurvivalForest.from_dict(d)
    if kind == "regforest":
        return RegressionForest.from_dict(d)
    raise ValueError(f"not a forest: {kind!r}")
