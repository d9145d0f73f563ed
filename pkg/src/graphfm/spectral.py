"""Smallest Laplacian eigenpairs, packaged as a truncated functional basis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import ConvergenceError, SizeError
from .graphs import GraphLaplacian

# dense eigh below this many nodes, shift-invert Lanczos above
DENSE_THRESHOLD = 2000


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """``vectors`` is n x k with orthonormal columns; ``values`` ascending."""

    vectors: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        V = np.array(self.vectors, dtype=np.float64)
        lam = np.array(self.values, dtype=np.float64).ravel()
        if V.ndim != 2 or V.shape[1] != lam.size:
            raise SizeError(f"vectors {V.shape} do not match {lam.size} eigenvalues")
        V.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "values", lam)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    def truncate(self, k: int) -> "SpectralBasis":
        if not 1 <= k <= self.k:
            raise SizeError(f"cannot truncate a {self.k}-vector basis to {k}")
        return SpectralBasis(self.vectors[:, :k], self.values[:k])


def _fix_signs(V):
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def _as_matrix(L):
    if isinstance(L, GraphLaplacian):
        return L.matrix
    return L


def smallest_eigenpairs(L, k: int, dense_threshold: int = DENSE_THRESHOLD,
                        tol: float = 0.0, maxiter: int | None = None) -> SpectralBasis:
    """Return the ``k`` smallest eigenpairs of the symmetric PSD matrix ``L``.

    Eigenvectors are sign-normalised so the entry of largest magnitude is
    positive. No canonical rotation is applied inside repeated eigenvalues.
    """
    A = _as_matrix(L)
    n = A.shape[0]
    if A.shape != (n, n):
        raise SizeError(f"Laplacian must be square, got {A.shape}")
    if not 1 <= k <= n:
        raise SizeError(f"basis size k={k} must lie in [1, {n}]")

    # ARPACK needs k < n; the full spectrum is a dense job anyway
    if n <= dense_threshold or k >= n - 1:
        M = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=np.float64)
        lam, V = scipy.linalg.eigh(M, subset_by_index=[0, k - 1])
    else:
        A = sp.csc_array(A, dtype=np.float64)
        # PSD: shift slightly below zero so the factorisation of A - shift*I is non-singular
        scale = max(float(abs(A).sum(axis=1).max()), 1.0)
        shift = -1e-3 * scale
        v0 = np.ones(n) / np.sqrt(n) + np.linspace(-1e-3, 1e-3, n)
        try:
            lam, V = eigsh(A, k=k, sigma=shift, which="LM", tol=tol, maxiter=maxiter, v0=v0)
        except ArpackNoConvergence as exc:
            iters = maxiter if maxiter is not None else n * 10
            raise ConvergenceError(
                f"Lanczos eigensolver did not converge: {len(exc.eigenvalues)} of {k} "
                f"eigenpairs after {iters} iterations", iterations=iters) from exc
        order = np.argsort(lam, kind="stable")
        lam, V = lam[order], V[:, order]
    return SpectralBasis(_fix_signs(V), lam)


@dataclass(frozen=True)
class BasisDiagnostics:
    orthonormality_error: float
    residual: float
    monotone: bool

    def ok(self, orth_tol=1e-8, res_tol=1e-6) -> bool:
        return self.orthonormality_error <= orth_tol and self.residual <= res_tol and self.monotone


def validate_basis(b: SpectralBasis, L) -> BasisDiagnostics:
    """Orthonormality, eigen-residual and ordering checks for ``b`` against ``L``.

    ``orthonormality_error`` is the Frobenius norm of ``V^T V - I`` and
    ``residual`` is ``||L V - V diag(values)||_F / max(1, ||L||_F)``.
    """
    A = _as_matrix(L)
    if A.shape[0] != b.n:
        raise SizeError(f"basis has {b.n} rows but Laplacian is {A.shape[0]} x {A.shape[1]}")
    V, lam = b.vectors, b.values
    G = V.T @ V
    orth = float(np.linalg.norm(G - np.eye(b.k)))
    LV = A @ V
    normL = sp.linalg.norm(A) if sp.issparse(A) else np.linalg.norm(A)
    res = float(np.linalg.norm(LV - V * lam) / max(1.0, normL))
    return BasisDiagnostics(orth, res, bool(np.all(np.diff(lam) >= 0)))


def save_basis(b: SpectralBasis, path, binary=False) -> None:
    """Store as a (n+1) x k matrix whose first row holds the eigenvalues."""
    from .data_io import save_matrix

    M = np.vstack([b.values[None, :], b.vectors])
    header = "spectral basis: row 0 = eigenvalues, rows 1..n = eigenvectors"
    save_matrix(M, path, binary=binary, comment=header)


def load_basis(path) -> SpectralBasis:
    from .data_io import load_matrix

    M = load_matrix(path)
    if M.shape[0] < 2:
        raise SizeError("basis file needs an eigenvalue row and at least one vector row")
    return SpectralBasis(M[1:], M[0])
