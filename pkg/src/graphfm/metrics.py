"""Masked RMSE, k-means purity and KNN classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import SizeError

KMEANS_MAX_ITERS = 300
DEFAULT_RESTARTS = 10


def rmse_masked(X, M, S) -> float:
    X, M = np.asarray(X, dtype=np.float64), np.asarray(M, dtype=np.float64)
    S = np.asarray(S).astype(bool)
    if X.shape != M.shape or S.shape != M.shape:
        raise SizeError(f"shape mismatch: X {X.shape}, M {M.shape}, S {S.shape}")
    count = int(S.sum())
    if count == 0:
        raise ValueError("rmse_masked needs at least one entry in the mask")
    d = (X - M)[S]
    return float(np.sqrt(d @ d / count))


@dataclass
class ClusteringResult:
    assignments: np.ndarray
    inertia: float
    centroids: np.ndarray
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)
    restarts: list = field(default_factory=list)


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[c] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(X, centers, max_iters):
    history = []
    assign = None
    for it in range(1, max_iters + 1):
        D = cdist(X, centers, metric="sqeuclidean")
        new = np.argmin(D, axis=1)
        history.append(float(D[np.arange(X.shape[0]), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(centers.shape[0]):
            members = X[assign == c]
            # an emptied cluster keeps its previous centre
            if members.shape[0]:
                centers[c] = members.mean(axis=0)
    D = cdist(X, centers, metric="sqeuclidean")
    inertia = float(D[np.arange(X.shape[0]), assign].sum())
    history.append(inertia)
    return assign, centers, inertia, it, history


def kmeans(data, k_clusters: int, n_restarts: int = DEFAULT_RESTARTS, seed=0,
           max_iters: int = KMEANS_MAX_ITERS) -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding; best inertia over restarts.

    ``result.restarts`` holds every restart's own ClusteringResult so callers
    can score all of them. Restart ``i`` draws from a generator seeded with
    ``(seed, i)``.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k_clusters <= n:
        raise SizeError(f"k_clusters={k_clusters} must lie in [1, {n}]")
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    runs = []
    for r in range(n_restarts):
        rng = np.random.default_rng([seed, r])
        assign, centers, inertia, it, hist = _lloyd(X, _kmeans_pp(X, k_clusters, rng), max_iters)
        runs.append(ClusteringResult(assign, inertia, centers, it, hist))
    best = min(runs, key=lambda res: res.inertia)
    return ClusteringResult(best.assignments, best.inertia, best.centroids, best.n_iter,
                            best.inertia_history, runs)


def clustering_purity(assignments, labels) -> float:
    a = np.asarray(assignments)
    y = np.asarray(labels)
    if a.shape != y.shape or a.ndim != 1:
        raise SizeError(f"assignments {a.shape} and labels {y.shape} must be equal-length vectors")
    if a.size == 0:
        raise ValueError("purity of an empty assignment is undefined")
    _, a_idx = np.unique(a, return_inverse=True)
    _, y_idx = np.unique(y, return_inverse=True)
    table = np.zeros((a_idx.max() + 1, y_idx.max() + 1), dtype=np.int64)
    np.add.at(table, (a_idx, y_idx), 1)
    return float(table.max(axis=1).sum() / a.size)


@dataclass
class PurityStats:
    max: float
    mean: float
    per_restart: list


def purity_protocol(representation, labels, k_clusters: int, seed=0,
                    n_restarts: int = DEFAULT_RESTARTS) -> PurityStats:
    """Cluster with k-means restarts; report the best and mean purity."""
    res = kmeans(representation, k_clusters, n_restarts=n_restarts, seed=seed)
    scores = [clustering_purity(r.assignments, labels) for r in res.restarts]
    return PurityStats(max(scores), float(np.mean(scores)), scores)


def knn_classify(train_X, train_y, test_X, K: int = 5, test_y=None):
    """Majority vote over the K nearest training points (Euclidean).

    Vote ties go to the class whose tied neighbours have the smallest summed
    distance; remaining ties go to the class that sorts first. Returns
    ``(predictions, accuracy)`` where accuracy is None without ``test_y``.
    """
    Xtr = np.asarray(train_X, dtype=np.float64)
    Xte = np.asarray(test_X, dtype=np.float64)
    ytr = np.asarray(train_y)
    if Xtr.ndim == 1:
        Xtr, Xte = Xtr[:, None], Xte[:, None]
    if Xtr.shape[0] == 0:
        raise ValueError("training set is empty")
    if ytr.shape[0] != Xtr.shape[0]:
        raise SizeError("train_X and train_y lengths differ")
    if not 1 <= K <= Xtr.shape[0]:
        raise SizeError(f"K={K} must lie in [1, {Xtr.shape[0]}]")
    classes, y_idx = np.unique(ytr, return_inverse=True)
    D = np.sqrt(cdist(Xte, Xtr, metric="sqeuclidean"))
    nbrs = np.argsort(D, axis=1, kind="stable")[:, :K]
    rows = np.arange(Xte.shape[0])[:, None]
    votes = np.zeros((Xte.shape[0], classes.size))
    dist_sum = np.zeros_like(votes)
    np.add.at(votes, (np.broadcast_to(rows, nbrs.shape), y_idx[nbrs]), 1.0)
    np.add.at(dist_sum, (np.broadcast_to(rows, nbrs.shape), y_idx[nbrs]), D[rows, nbrs])
    top = votes == votes.max(axis=1, keepdims=True)
    pick = np.argmin(np.where(top, dist_sum, np.inf), axis=1)
    pred = classes[pick]
    acc = None
    if test_y is not None:
        test_y = np.asarray(test_y)
        if test_y.shape[0] != pred.shape[0]:
            raise SizeError("test_X and test_y lengths differ")
        acc = float(np.mean(pred == test_y))
    return pred, acc
