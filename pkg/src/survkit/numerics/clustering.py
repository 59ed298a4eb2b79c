"""PCA, k-means and diagonal-covariance Gaussian mixtures."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .rng import make_rng

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class PCAState:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) @ self.components.T

    def inverse_transform(self, scores):
        return np.asarray(scores, dtype=float) @ self.components + self.mean


def pca_fit(X, k):
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:k]
    comps = vecs[:, order].T.copy()
    for row in comps:
        # sign convention: leading non-negligible coordinate positive
        lead = np.flatnonzero(np.abs(row) > 1e-12)
        if lead.size and row[lead[0]] < 0:
            row *= -1.0
    return PCAState(mean, comps, np.maximum(vals[order], 0.0))


def pca_transform(state, X):
    return state.transform(X)


@dataclass
class ClusteringState:
    method: str
    means: np.ndarray
    variances: np.ndarray = None
    mix_weights: np.ndarray = None
    inertia: float = None
    log_likelihood: float = None
    history: list = field(default_factory=list)

    @property
    def n_clusters(self):
        return self.means.shape[0]

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if self.method == "kmeans":
            return _sq_dists(X, self.means).argmin(axis=1)
        return self.responsibilities(X).argmax(axis=1)

    def responsibilities(self, X):
        logp = _gmm_log_joint(np.asarray(X, dtype=float), self.means, self.variances,
                              self.mix_weights)
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def distances(self, X):
        """Euclidean distance for k-means, diagonal Mahalanobis distance for a GMM."""
        X = np.asarray(X, dtype=float)
        if self.method == "kmeans":
            return np.sqrt(_sq_dists(X, self.means))
        diff = X[:, None, :] - self.means[None, :, :]
        return np.sqrt(np.sum(diff * diff / self.variances[None, :, :], axis=2))


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(X, C, max_iter):
    labels = None
    inertias = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        inertias.append(float(d2[np.arange(X.shape[0]), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = C.copy()
        for k in range(C.shape[0]):
            members = labels == k
            if members.any():
                C[k] = X[members].mean(axis=0)
            else:
                # empty cluster: move it to the point farthest from its own centroid
                far = int(d2[np.arange(X.shape[0]), labels].argmax())
                C[k] = X[far]
                labels = labels.copy()
                labels[far] = k
    d2 = _sq_dists(X, C)
    labels = d2.argmin(axis=1)
    return C, labels, float(d2[np.arange(X.shape[0]), labels].sum()), inertias


def kmeans(X, K, seed=0, restarts=10, max_iter=300):
    """k-means++ seeding, Lloyd iterations to an assignment fixpoint, best of ``restarts``.

    Each restart draws from substream ``(seed, restart)``; the winner is the
    lowest inertia with ties going to the lowest restart index.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, n={n}]")
    best = None
    for r in range(max(1, restarts)):
        rng = make_rng(seed, r)
        C, _, inertia, hist = _lloyd(X, _kmeans_pp(X, K, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = ClusteringState("kmeans", C, inertia=inertia, history=hist)
    return best


def _gmm_log_joint(X, means, variances, mix):
    diff = X[:, None, :] - means[None, :, :]
    ll = -0.5 * np.sum(diff * diff / variances[None] + np.log(2 * np.pi * variances[None]), axis=2)
    with np.errstate(divide="ignore"):
        return ll + np.log(mix)[None, :]


def gmm_fit(X, K, seed=0, restarts=10, max_iter=500, tol=1e-10):
    """Diagonal-covariance Gaussian mixture by EM, initialised from k-means.

    Variances are floored at ``VAR_FLOOR``.  ``history`` records the total
    log-likelihood after every E-step; EM makes it non-decreasing.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, n={n}]")
    best = None
    for r in range(max(1, restarts)):
        _, labels, _, _ = _lloyd(X, _kmeans_pp(X, K, make_rng(seed, r)), max_iter)
        resp = np.zeros((n, K))
        resp[np.arange(n), labels] = 1.0
        means, variances, mix = _gmm_mstep(X, resp)
        history = []
        for _ in range(max_iter):
            logp = _gmm_log_joint(X, means, variances, mix)
            norm = logsumexp(logp, axis=1, keepdims=True)
            ll = float(norm.sum())
            history.append(ll)
            if len(history) > 1 and history[-1] - history[-2] < tol * max(1.0, abs(ll)):
                break
            resp = np.exp(logp - norm)
            means, variances, mix = _gmm_mstep(X, resp)
        state = ClusteringState("gmm", means, variances, mix, log_likelihood=history[-1],
                                history=history)
        if best is None or state.log_likelihood > best.log_likelihood:
            best = state
    return best


def _gmm_mstep(X, resp):
    nk = resp.sum(axis=0)
    mix = nk / nk.sum()
    safe = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ X) / safe[:, None]
    variances = np.empty_like(means)
    for k in range(resp.shape[1]):
        diff = X - means[k]
        variances[k] = (resp[:, k] @ (diff * diff)) / safe[k]
    variances = np.maximum(variances, VAR_FLOOR)
    return means, variances, mix
