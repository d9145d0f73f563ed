"""Synthetic geometric completion problems with community-structured graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import SizeError
from .graphs import WeightedGraph, laplacian
from .solver import MaskedMatrix
from .spectral import SpectralBasis, smallest_eigenpairs


@dataclass
class SyntheticSpec:
    """Parameters of one synthetic instance.

    ``noise_level`` is the graph-noise std expressed as a percentage of the
    mean non-zero edge weight (so 5 means sigma = 0.05 * mean weight).
    ``perturbation`` adds i.i.d. Gaussian noise of that many times the RMS of
    the ground truth, making it only approximately basis-consistent.
    """

    m: int = 150
    n: int = 200
    rank: int = 10
    communities_rows: int = 4
    communities_cols: int = 4
    p_in: float = 0.5
    p_out: float = 0.01
    density: float = 0.1
    noise_level: float = 0.0
    perturbation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.m < 1 or self.n < 1:
            raise SizeError("m and n must be positive")
        if not 0 <= self.rank <= min(self.m, self.n):
            raise ValueError(f"rank must lie in [0, {min(self.m, self.n)}], got {self.rank}")
        if not 0 < self.density <= 1:
            raise ValueError(f"density must lie in (0, 1], got {self.density}")
        if self.noise_level < 0 or self.perturbation < 0:
            raise ValueError("noise_level and perturbation must be >= 0")
        if self.communities_rows < 1 or self.communities_cols < 1:
            raise ValueError("community counts must be >= 1")
        _check_sbm(self.p_in, self.p_out)


def _check_sbm(p_in, p_out):
    if not (0 <= p_out < p_in <= 1):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def block_labels(n: int, blocks: int) -> np.ndarray:
    """Contiguous, near-equal block assignment of ``n`` nodes."""
    return np.repeat(np.arange(blocks), [len(a) for a in np.array_split(np.arange(n), blocks)])


def community_graph(n: int, blocks: int, p_in: float, p_out: float, seed=None) -> WeightedGraph:
    """Unit-weight stochastic block model graph."""
    if blocks < 1 or n < 1:
        raise ValueError("n and blocks must be >= 1")
    if blocks > n:
        raise ValueError(f"cannot split {n} nodes into {blocks} blocks")
    _check_sbm(p_in, p_out)
    rng = _rng(seed)
    lab = block_labels(n, blocks)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(lab[iu] == lab[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    return WeightedGraph.from_edges(n, iu[keep], ju[keep], np.ones(int(keep.sum())))


def _random_orthogonal(r, rng):
    Z = rng.standard_normal((r, r))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.diag(R))


def basis_consistent_matrix(row_basis: SpectralBasis, col_basis: SpectralBasis, r: int,
                            seed=None) -> np.ndarray:
    """Rank-``r`` matrix ``Phi_r U V^T Psi_r^T`` with random orthogonal U, V.

    All r singular values equal 1, so the left (right) singular vectors span
    exactly the first r row (column) basis vectors.
    """
    if r < 0 or r > min(row_basis.k, col_basis.k):
        raise SizeError(f"rank {r} exceeds basis sizes ({row_basis.k}, {col_basis.k})")
    m, n = row_basis.n, col_basis.n
    if r == 0:
        return np.zeros((m, n))
    rng = _rng(seed)
    U = row_basis.vectors[:, :r] @ _random_orthogonal(r, rng)
    V = col_basis.vectors[:, :r] @ _random_orthogonal(r, rng)
    return U @ V.T


def sample_mask(m: int, n: int, density: float, seed=None) -> np.ndarray:
    """Boolean mask with exactly ``round(density * m * n)`` (at least 1) ones."""
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    total = m * n
    count = min(total, max(1, int(round(density * total))))
    rng = _rng(seed)
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=count, replace=False)] = True
    return flat.reshape(m, n)


def noise_sigma(g: WeightedGraph, level: float) -> float:
    """Convert a noise level (percent of mean edge weight) to an absolute std."""
    w = g.adjacency.data
    return 0.0 if w.size == 0 else level / 100.0 * float(w.mean())


def perturb_adjacency(g: WeightedGraph, noise_sigma: float, seed=None) -> WeightedGraph:
    """Gaussian noise on existing edges, negatives dropped, then symmetrized.

    Each stored direction of an edge receives independent noise; after
    clamping at zero the matrix is averaged with its transpose.
    """
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return g
    rng = _rng(seed)
    A = g.adjacency.tocoo()
    w = np.maximum(A.data + rng.normal(0.0, noise_sigma, size=A.data.size), 0.0)
    N = sp.csr_array((w, (A.row, A.col)), shape=A.shape)
    return WeightedGraph(sp.csr_array((N + N.T) * 0.5))


@dataclass(eq=False)
class SyntheticInstance:
    spec: SyntheticSpec
    truth: np.ndarray
    observed: MaskedMatrix
    test_mask: np.ndarray
    row_graph: WeightedGraph
    col_graph: WeightedGraph
    row_basis: SpectralBasis
    col_basis: SpectralBasis


def make_instance(spec: SyntheticSpec, k: int = 30, k_c: int | None = None) -> SyntheticInstance:
    """Generate graphs, a basis-consistent ground truth and a sampled support.

    The ground truth is built from the clean graphs' eigenbases. With a
    non-zero ``noise_level`` the returned graphs and bases come from the
    perturbed adjacencies, which is what a solver gets to see.
    """
    spec.validate()
    k_r, k_c = k, k if k_c is None else k_c
    if spec.rank > min(k_r, k_c):
        raise SizeError(f"rank {spec.rank} exceeds basis size {min(k_r, k_c)}")
    ss = np.random.SeedSequence(spec.seed)
    r_graph, r_mat, r_mask, r_noise, r_pert = [np.random.default_rng(s) for s in ss.spawn(5)]

    g_rows = community_graph(spec.m, spec.communities_rows, spec.p_in, spec.p_out, r_graph)
    g_cols = community_graph(spec.n, spec.communities_cols, spec.p_in, spec.p_out, r_graph)
    clean_r = smallest_eigenpairs(laplacian(g_rows), k_r)
    clean_c = smallest_eigenpairs(laplacian(g_cols), k_c)
    truth = basis_consistent_matrix(clean_r, clean_c, spec.rank, r_mat)
    if spec.perturbation > 0 and spec.rank > 0:
        rms = float(np.sqrt(np.mean(truth ** 2)))
        truth = truth + spec.perturbation * rms * r_pert.standard_normal(truth.shape)

    if spec.noise_level > 0:
        g_rows = perturb_adjacency(g_rows, noise_sigma(g_rows, spec.noise_level), r_noise)
        g_cols = perturb_adjacency(g_cols, noise_sigma(g_cols, spec.noise_level), r_noise)
        row_basis = smallest_eigenpairs(laplacian(g_rows), k_r)
        col_basis = smallest_eigenpairs(laplacian(g_cols), k_c)
    else:
        row_basis, col_basis = clean_r, clean_c

    mask = sample_mask(spec.m, spec.n, spec.density, r_mask)
    observed = MaskedMatrix(np.where(mask, truth, 0.0), mask)
    return SyntheticInstance(spec, truth, observed, ~mask, g_rows, g_cols, row_basis, col_basis)
