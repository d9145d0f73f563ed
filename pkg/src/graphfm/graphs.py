"""KNN similarity graphs, Laplacians and the plain-text edge-list format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import DataError, SizeError

DEFAULT_K = 10


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Undirected weighted graph stored as a symmetric sparse adjacency.

    The constructor validates symmetry (exact), non-negativity and an empty
    diagonal, so any instance in circulation satisfies those invariants.
    """

    adjacency: sp.csr_array

    def __post_init__(self):
        A = sp.csr_array(self.adjacency, dtype=np.float64)
        A.sum_duplicates()
        A.eliminate_zeros()
        if A.shape[0] != A.shape[1]:
            raise SizeError(f"adjacency must be square, got {A.shape}")
        if A.nnz and not np.all(np.isfinite(A.data)):
            raise ValueError("adjacency has non-finite weights")
        if A.nnz and A.data.min() < 0:
            raise ValueError("adjacency has negative weights")
        if np.any(A.diagonal() != 0):
            raise ValueError("adjacency has a non-zero diagonal")
        if (A != A.T).nnz:
            raise ValueError("adjacency is not symmetric")
        A.sort_indices()
        object.__setattr__(self, "adjacency", A)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2

    def edges(self):
        """Upper-triangular (i, j, w) triples with i < j."""
        U = sp.triu(self.adjacency, k=1, format="coo")
        order = np.lexsort((U.col, U.row))
        return U.row[order], U.col[order], U.data[order]

    def to_dense(self) -> np.ndarray:
        return self.adjacency.toarray()

    @classmethod
    def from_dense(cls, W) -> "WeightedGraph":
        return cls(sp.csr_array(np.asarray(W, dtype=np.float64)))

    @classmethod
    def from_edges(cls, n, rows, cols, weights) -> "WeightedGraph":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        A = sp.coo_array(
            (np.concatenate([w, w]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
            shape=(n, n),
        )
        return cls(A.tocsr())


@dataclass(frozen=True, eq=False)
class GraphLaplacian:
    """Unnormalized Laplacian ``L = D - W``."""

    matrix: sp.csr_array
    degree: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def laplacian(g: WeightedGraph) -> GraphLaplacian:
    W = g.adjacency
    degree = np.asarray(W.sum(axis=1)).ravel()
    L = sp.diags_array(degree, format="csr") - W
    return GraphLaplacian(sp.csr_array(L), degree)


def _check_finite(data, what="data"):
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite entries")


def knn_graph(data, K: int = DEFAULT_K, kernel_scale=None) -> WeightedGraph:
    """Gaussian-weighted K-nearest-neighbour graph over the rows of ``data``.

    Edge i-j exists when j is among the K nearest neighbours of i or vice
    versa; the weight is ``exp(-d_ij**2 / sigma**2)`` (the max of the two
    directed weights, which coincide for a symmetric distance).

    ``kernel_scale`` is either a positive float used as sigma, or ``None`` to
    use the mean distance from each node to its K-th nearest neighbour.
    Ties in distance are broken by node index.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if K < 1:
        raise SizeError(f"K must be >= 1, got {K}")
    if n < K + 1:
        raise SizeError(f"knn_graph needs at least K+1={K + 1} samples, got {n}")
    _check_finite(X)

    D2 = cdist(X, X, metric="sqeuclidean")
    np.fill_diagonal(D2, np.inf)
    # stable sort so equal distances resolve by index, independent of platform
    nbrs = np.argsort(D2, axis=1, kind="stable")[:, :K]
    rows = np.repeat(np.arange(n), K)
    cols = nbrs.ravel()
    d2 = D2[rows, cols]

    if kernel_scale is None:
        sigma = float(np.mean(np.sqrt(D2[np.arange(n), nbrs[:, -1]])))
        if sigma == 0.0:
            sigma = 1.0
    else:
        sigma = float(kernel_scale)
        if not sigma > 0:
            raise ValueError(f"kernel_scale must be positive, got {kernel_scale}")

    # clamp so far-away neighbours keep their edge instead of underflowing to 0
    w = np.maximum(np.exp(-d2 / sigma**2), np.finfo(np.float64).tiny)
    directed = sp.coo_array((w, (rows, cols)), shape=(n, n)).tocsr()
    # union of directed relations; maximum keeps exact symmetry
    A = directed.maximum(directed.T)
    return WeightedGraph(sp.csr_array(A))


def standardize_features(data) -> np.ndarray:
    """Zero mean, unit population std (ddof=0) per column; constant columns -> 0."""
    X = np.asarray(data, dtype=np.float64)
    _check_finite(X)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    out = X - mu
    const = sd == 0
    sd = np.where(const, 1.0, sd)
    out = out / sd
    out[:, const] = 0.0
    return out


def save_edge_list(g: WeightedGraph, path) -> None:
    rows, cols, w = g.edges()
    with open(path, "w") as fh:
        fh.write(f"# nodes {g.n}\n")
        for i, j, x in zip(rows, cols, w):
            fh.write(f"{i} {j} {float(x)!r}\n")


def load_edge_list(path) -> WeightedGraph:
    """Read an edge list written by :func:`save_edge_list` (or by hand).

    Edges may appear in either orientation; listing the same pair twice with
    different weights is an error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError("edge-list file not found", path=path)
    n = None
    edges = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "nodes":
                    try:
                        n = int(parts[1])
                    except ValueError:
                        raise DataError(f"bad node count {parts[1]!r}", path, lineno) from None
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"expected 'i j weight', got {line!r}", path, lineno)
            try:
                i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise DataError(f"non-numeric field in {line!r}", path, lineno) from None
            if n is None:
                raise DataError("missing '# nodes N' header before first edge", path, lineno)
            if not (0 <= i < n and 0 <= j < n):
                raise DataError(f"node index out of range [0, {n})", path, lineno)
            if i == j:
                raise DataError("self-loop", path, lineno)
            if not (np.isfinite(w) and w >= 0):
                raise DataError(f"invalid weight {w}", path, lineno)
            key = (min(i, j), max(i, j))
            if key in edges and edges[key] != w:
                raise DataError(f"conflicting weights for edge {key}", path, lineno)
            edges[key] = w
    if n is None:
        raise DataError("missing '# nodes N' header", path)
    if edges:
        ij = np.array(list(edges.keys()), dtype=np.int64)
        w = np.array(list(edges.values()))
        return WeightedGraph.from_edges(n, ij[:, 0], ij[:, 1], w)
    return WeightedGraph(sp.csr_array((n, n)))
