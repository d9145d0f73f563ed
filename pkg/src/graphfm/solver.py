"""Functional-map matrix recovery.

The unknown matrix is parametrised as ``X = Phi P C Q^T Psi^T`` where
``Phi`` (m x k_r) and ``Psi`` (n x k_c) are truncated Laplacian eigenbases of
the row and column graphs. ``P`` and ``Q`` are optional square alignment
factors (identity when disabled). The fitted energy is::

    ||(X - M) * S||_F^2 + mu * ||C Lr - Lc C||_F^2

with ``S`` the binary support mask and ``Lr``/``Lc`` the diagonal eigenvalue
matrices. The commutativity term always acts on ``C`` alone.

Row/column convention: the row basis comes from a graph whose nodes are the
rows of ``M``, the column basis from a graph over its columns.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DivergenceError, SizeError
from .report import ExperimentReport
from .spectral import SpectralBasis

log = logging.getLogger(__name__)

OPTIMIZERS = ("adaptive", "plain_gd")

# H = A_S^T A_S is (k_r k_c)^2 doubles; stay well under this
_GRAM_MAX_ENTRIES = 2_000_000


@dataclass(frozen=True, eq=False)
class MaskedMatrix:
    """Data matrix with a 0/1 support mask. Unobserved values are stored as 0."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.mask)
        M = np.array(self.values, dtype=np.float64)
        if M.ndim != 2 or S.shape != M.shape:
            raise SizeError(f"values {M.shape} and mask {S.shape} must be equal 2-D shapes")
        if not np.all((S == 0) | (S == 1)):
            raise ValueError("mask entries must be 0 or 1")
        S = S.astype(bool)
        if not np.all(np.isfinite(M[S])):
            raise ValueError("observed values must be finite")
        M[~S] = 0.0
        M.setflags(write=False)
        S = S.copy()
        S.setflags(write=False)
        object.__setattr__(self, "values", M)
        object.__setattr__(self, "mask", S)

    @classmethod
    def full(cls, values) -> "MaskedMatrix":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def observed(self):
        return np.nonzero(self.mask)

    def restrict(self, mask) -> "MaskedMatrix":
        """Same values on the intersection with another mask."""
        mask = np.asarray(mask, dtype=bool) & self.mask
        return MaskedMatrix(np.where(mask, self.values, 0.0), mask)


@dataclass(frozen=True, eq=False)
class FunctionalMap:
    row_basis: SpectralBasis
    col_basis: SpectralBasis
    C: np.ndarray
    P: np.ndarray | None = None
    Q: np.ndarray | None = None

    def __post_init__(self):
        kr, kc = self.row_basis.k, self.col_basis.k
        C = np.asarray(self.C, dtype=np.float64)
        if C.shape != (kr, kc):
            raise SizeError(f"C must be {kr} x {kc}, got {C.shape}")
        object.__setattr__(self, "C", C)
        if (self.P is None) != (self.Q is None):
            raise ValueError("P and Q must both be given or both omitted")
        if self.P is not None:
            P = np.asarray(self.P, dtype=np.float64)
            Q = np.asarray(self.Q, dtype=np.float64)
            if P.shape != (kr, kr) or Q.shape != (kc, kc):
                raise SizeError(f"P must be {kr}x{kr} and Q {kc}x{kc}, got {P.shape}, {Q.shape}")
            object.__setattr__(self, "P", P)
            object.__setattr__(self, "Q", Q)

    @property
    def use_pq(self) -> bool:
        return self.P is not None

    @property
    def shape(self):
        return self.row_basis.n, self.col_basis.n

    def coupling(self) -> np.ndarray:
        """The effective spectral coefficients ``P C Q^T``."""
        if self.P is None:
            return self.C
        return self.P @ self.C @ self.Q.T

    def with_params(self, C, P=None, Q=None) -> "FunctionalMap":
        return FunctionalMap(self.row_basis, self.col_basis, C, P, Q)


@dataclass
class FitConfig:
    mu: float = 1e-5
    learning_rate: float = 1e-3
    optimizer: str = "adaptive"
    max_iters: int = 50_000
    eval_every: int = 100
    patience: int = 20
    # a validation check counts as progress only if it beats the best score
    # by this relative margin (the best iterate is still tracked exactly)
    min_rel_improvement: float = 1e-3
    val_fraction: float = 0.05
    use_pq: bool = False
    seed: int = 0
    # adaptive only: divide the step by `lr_decay` once the train objective
    # has not dropped by a factor (1 - plateau_tol) for `lr_patience`
    # evaluation windows; lr_decay = 1 disables
    lr_decay: float = 10.0
    lr_patience: int = 3
    plateau_tol: float = 1e-3
    min_learning_rate: float = 1e-9

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.mu >= 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 <= self.min_rel_improvement < 1:
            raise ValueError("min_rel_improvement must lie in [0, 1)")
        if self.max_iters < 0 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("max_iters >= 0, eval_every >= 1 and patience >= 1 required")
        if self.lr_decay < 1 or self.lr_patience < 1 or not 0 <= self.plateau_tol < 1:
            raise ValueError("lr_decay >= 1, lr_patience >= 1 and 0 <= plateau_tol < 1 required")


# ---------------------------------------------------------------------------
# energy terms
# ---------------------------------------------------------------------------

def reconstruct(fm: FunctionalMap) -> np.ndarray:
    Phi, Psi = fm.row_basis.vectors, fm.col_basis.vectors
    return (Phi @ fm.coupling()) @ Psi.T


def _check_shapes(fm, masked):
    if fm.shape != masked.shape:
        raise SizeError(f"map reconstructs {fm.shape} but data is {masked.shape}")


def data_term(fm: FunctionalMap, masked: MaskedMatrix) -> float:
    _check_shapes(fm, masked)
    R = np.where(masked.mask, reconstruct(fm) - masked.values, 0.0)
    return float(np.sum(R * R))


def commutativity_weights(row_values, col_values) -> np.ndarray:
    """Entry-wise weights W with ``||C Lr - Lc C||^2 = sum((W * C)**2)``.

    For square C the term is taken literally: entry (i, j) of ``C Lr - Lc C``
    is ``C_ij (lr_j - lc_i)``. That product is undefined when k_r != k_c, so
    rectangular maps use the orientation that pairs each coefficient with its
    own row and column eigenvalue, ``C_ij (lr_i - lc_j)``.
    """
    lr = np.asarray(row_values, dtype=np.float64)
    lc = np.asarray(col_values, dtype=np.float64)
    if lr.size == lc.size:
        return lr[None, :] - lc[:, None]
    return lr[:, None] - lc[None, :]


def commutativity_reg(fm: FunctionalMap) -> float:
    W = commutativity_weights(fm.row_basis.values, fm.col_basis.values)
    return float(np.sum((W * fm.C) ** 2))


def objective(fm: FunctionalMap, masked: MaskedMatrix, mu: float) -> float:
    return data_term(fm, masked) + mu * commutativity_reg(fm)


def _chain_rule(GA, C, P, Q):
    """Push a gradient w.r.t. ``A = P C Q^T`` back to (C, P, Q)."""
    if P is None:
        return {"C": GA}
    return {"C": P.T @ GA @ Q, "P": GA @ Q @ C.T, "Q": GA.T @ P @ C}


def gradient(fm: FunctionalMap, masked: MaskedMatrix, mu: float) -> dict:
    """Analytic gradient of :func:`objective` w.r.t. the free variables.

    Returns a dict with key ``"C"`` and, when the map carries alignment
    factors, ``"P"`` and ``"Q"``.
    """
    _check_shapes(fm, masked)
    Phi, Psi = fm.row_basis.vectors, fm.col_basis.vectors
    R = np.where(masked.mask, reconstruct(fm) - masked.values, 0.0)
    GA = 2.0 * (Phi.T @ R @ Psi)
    grads = _chain_rule(GA, fm.C, fm.P, fm.Q)
    W = commutativity_weights(fm.row_basis.values, fm.col_basis.values)
    grads["C"] = grads["C"] + 2.0 * mu * (W * W) * fm.C
    return grads


def init_map(row_basis: SpectralBasis, col_basis: SpectralBasis, masked: MaskedMatrix,
             use_pq: bool = False) -> FunctionalMap:
    """Project the observed data onto the bases: ``C = Phi^T (M * S) Psi``, P = Q = I."""
    if masked.shape != (row_basis.n, col_basis.n):
        raise SizeError(f"bases span {row_basis.n} x {col_basis.n} but data is {masked.shape}")
    C = row_basis.vectors.T @ masked.values @ col_basis.vectors
    if use_pq:
        return FunctionalMap(row_basis, col_basis, C, np.eye(row_basis.k), np.eye(col_basis.k))
    return FunctionalMap(row_basis, col_basis, C)


# ---------------------------------------------------------------------------
# fast data-term evaluation used inside the descent loop
# ---------------------------------------------------------------------------

class _MaskedEnergy:
    """Evaluates ``||(Phi A Psi^T - M) * S||^2`` and its gradient in A.

    Picks the cheapest of three equivalent strategies for the given support:
    a dense residual, a per-entry sparse residual, or a precomputed Gram
    (normal-equation) matrix over vec(A).
    """

    def __init__(self, Phi, Psi, rows, cols, vals, shape):
        self.Phi, self.Psi = Phi, Psi
        self.rows, self.cols, self.vals = rows, cols, vals
        m, n = shape
        kr, kc = Phi.shape[1], Psi.shape[1]
        N = rows.size
        cost_dense = 2 * m * n * (kr + kc)
        cost_sparse = 4 * N * kr * kc
        cost_gram = 2 * (kr * kc) ** 2
        if (kr * kc) ** 2 <= _GRAM_MAX_ENTRIES and cost_gram < min(cost_dense, cost_sparse):
            self.mode = "gram"
            self._build_gram()
        elif cost_dense <= cost_sparse:
            self.mode = "dense"
            self.M = np.zeros(shape)
            self.S = np.zeros(shape, dtype=bool)
            self.M[rows, cols] = vals
            self.S[rows, cols] = True
        else:
            self.mode = "sparse"
            self.Pr = Phi[rows]
            self.Pc = Psi[cols]

    def _build_gram(self, chunk=4096):
        kr, kc = self.Phi.shape[1], self.Psi.shape[1]
        H = np.zeros((kr * kc, kr * kc))
        b = np.zeros(kr * kc)
        for s in range(0, self.rows.size, chunk):
            r, c = self.rows[s:s + chunk], self.cols[s:s + chunk]
            # row t of K is vec(phi_r psi_c^T) (C order)
            K = (self.Phi[r][:, :, None] * self.Psi[c][:, None, :]).reshape(r.size, -1)
            H += K.T @ K
            b += K.T @ self.vals[s:s + chunk]
        self.H, self.b = H, b
        self.c0 = float(self.vals @ self.vals)

    def __call__(self, A):
        if self.mode == "gram":
            a = A.ravel()
            Ha = self.H @ a
            E = float(a @ Ha - 2.0 * (self.b @ a) + self.c0)
            return max(E, 0.0), (2.0 * (Ha - self.b)).reshape(A.shape)
        if self.mode == "dense":
            R = np.where(self.S, (self.Phi @ A) @ self.Psi.T - self.M, 0.0)
            return float(np.sum(R * R)), 2.0 * (self.Phi.T @ R @ self.Psi)
        r = np.einsum("ij,ij->i", self.Pr @ A, self.Pc) - self.vals
        return float(r @ r), 2.0 * ((self.Pr * r[:, None]).T @ self.Pc)


def _entry_values(Phi, Psi, A, rows, cols):
    return np.einsum("ij,ij->i", Phi[rows] @ A, Psi[cols])


def _rmse(pred, target):
    if pred.size == 0:
        return float("nan")
    d = pred - target
    return float(np.sqrt(d @ d / d.size))


def split_support(masked: MaskedMatrix, val_fraction: float, seed: int):
    """Seeded uniform split of observed entries into train/val index arrays."""
    rows, cols = masked.observed()
    N = rows.size
    n_val = int(round(val_fraction * N))
    if n_val >= N:
        n_val = N - 1
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N)
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return (rows[train], cols[train]), (rows[val], cols[val])


@dataclass
class _AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def fit(masked: MaskedMatrix, row_basis: SpectralBasis, col_basis: SpectralBasis,
        cfg: FitConfig | None = None):
    """Minimise the masked functional-map energy by iterative descent.

    Observed entries are split (seeded) into train and validation parts; only
    train entries enter the gradient. Validation RMSE is evaluated every
    ``cfg.eval_every`` iterations and the best-validation iterate is returned.
    With ``val_fraction == 0`` the train RMSE plays the validation role.

    Returns ``(FunctionalMap, ExperimentReport)``.
    """
    cfg = cfg or FitConfig()
    cfg.validate()
    if masked.shape != (row_basis.n, col_basis.n):
        raise SizeError(f"bases span {row_basis.n} x {col_basis.n} but data is {masked.shape}")
    if masked.n_observed == 0:
        raise ValueError("cannot fit: the support mask has no observed entries")

    t_start = time.perf_counter()
    (tr_r, tr_c), (va_r, va_c) = split_support(masked, cfg.val_fraction, cfg.seed)
    M = masked.values
    tr_v, va_v = M[tr_r, tr_c], M[va_r, va_c]
    Phi, Psi = row_basis.vectors, col_basis.vectors

    train_mask = np.zeros(masked.shape, dtype=bool)
    train_mask[tr_r, tr_c] = True
    fm0 = init_map(row_basis, col_basis, masked.restrict(train_mask), cfg.use_pq)
    params = {"C": fm0.C.copy()}
    if cfg.use_pq:
        params["P"], params["Q"] = fm0.P.copy(), fm0.Q.copy()

    energy = _MaskedEnergy(Phi, Psi, tr_r, tr_c, tr_v, masked.shape)
    W2 = commutativity_weights(row_basis.values, col_basis.values) ** 2
    mu = cfg.mu

    def coupling(p):
        if "P" in p:
            return p["P"] @ p["C"] @ p["Q"].T
        return p["C"]

    def evaluate(p):
        A = coupling(p)
        # overflow is reported as a DivergenceError by the caller
        with np.errstate(over="ignore", invalid="ignore"):
            E, GA = energy(A)
            E += mu * float(np.sum(W2 * p["C"] ** 2))
        g = _chain_rule(GA, p["C"], p.get("P"), p.get("Q"))
        g["C"] = g["C"] + 2.0 * mu * W2 * p["C"]
        return E, g

    def monitor(p):
        A = coupling(p)
        if va_r.size:
            return _rmse(_entry_values(Phi, Psi, A, va_r, va_c), va_v)
        return _rmse(_entry_values(Phi, Psi, A, tr_r, tr_c), tr_v)

    lr = cfg.learning_rate
    adam = _AdamState()
    b1, b2, eps = 0.9, 0.999, 1e-8

    objectives = []
    val_iters, val_values = [], []
    best = (np.inf, 0, {k: v.copy() for k, v in params.items()})
    since_best = 0
    best_train = np.inf
    window_min = np.inf
    stalled = 0
    it = 0
    stop_reason = "max_iters"
    while True:
        E, g = evaluate(params)
        if not np.isfinite(E) or not all(np.all(np.isfinite(x)) for x in g.values()):
            raise DivergenceError(f"objective became non-finite at iteration {it}", iteration=it)
        objectives.append(E)
        window_min = min(window_min, E)

        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            score = monitor(params)
            val_iters.append(it)
            val_values.append(score)
            progress = score < best[0] * (1.0 - cfg.min_rel_improvement)
            if score < best[0]:
                best = (score, it, {k: v.copy() for k, v in params.items()})
            if progress:
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stop_reason = "early_stop"
                    break
            if window_min < best_train * (1.0 - cfg.plateau_tol):
                stalled = 0
            else:
                stalled += 1
            best_train = min(best_train, window_min)
            window_min = np.inf
            if (cfg.optimizer == "adaptive" and cfg.lr_decay > 1
                    and stalled >= cfg.lr_patience and lr > cfg.min_learning_rate):
                lr = max(lr / cfg.lr_decay, cfg.min_learning_rate)
                stalled = 0
                log.debug("iteration %d: learning rate -> %g", it, lr)
        if it >= cfg.max_iters:
            break

        if cfg.optimizer == "plain_gd":
            for k in params:
                params[k] = params[k] - lr * g[k]
        else:
            adam.t += 1
            c1 = 1.0 - b1 ** adam.t
            c2 = 1.0 - b2 ** adam.t
            for k in params:
                mk = adam.m.get(k, 0.0) * b1 + (1 - b1) * g[k]
                vk = adam.v.get(k, 0.0) * b2 + (1 - b2) * g[k] * g[k]
                adam.m[k], adam.v[k] = mk, vk
                params[k] = params[k] - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
        it += 1

    best_score, best_it, best_params = best
    fm = fm0.with_params(best_params["C"], best_params.get("P"), best_params.get("Q"))
    A = fm.coupling()
    train_rmse = _rmse(_entry_values(Phi, Psi, A, tr_r, tr_c), tr_v)
    val_rmse = _rmse(_entry_values(Phi, Psi, A, va_r, va_c), va_v)

    val_col = np.full(len(objectives), np.nan)
    val_col[np.asarray(val_iters, dtype=np.int64)] = val_values
    report = ExperimentReport(
        label="ours" if mu > 0 else "ours_fm",
        config={**asdict(cfg), "k_r": row_basis.k, "k_c": col_basis.k},
        metrics={
            "train_rmse": train_rmse,
            "val_rmse": val_rmse,
            "best_iteration": best_it,
            "iterations": it,
            "stop_reason": stop_reason,
            "final_objective": objective_value(fm, tr_r, tr_c, tr_v, mu),
            "n_train": int(tr_r.size),
            "n_val": int(va_r.size),
            "energy_mode": energy.mode,
        },
        meta={"wall_seconds": time.perf_counter() - t_start},
        iteration=np.arange(len(objectives), dtype=np.int64),
        train_objective=np.array(objectives),
        val_rmse=val_col,
    )
    return fm, report


def objective_value(fm, rows, cols, vals, mu):
    r = _entry_values(fm.row_basis.vectors, fm.col_basis.vectors, fm.coupling(), rows, cols) - vals
    return float(r @ r) + mu * commutativity_reg(fm)


def reduce_dimension(data, row_basis: SpectralBasis, col_basis: SpectralBasis,
                     cfg: FitConfig | None = None):
    """Low-rank representation of a fully observed matrix.

    Fits the data term over the complete matrix (``mu`` as configured) and
    returns ``(X, report)`` with ``X = Phi P C Q^T Psi^T``.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite entries")
    cfg = cfg or FitConfig(val_fraction=0.0)
    fm, report = fit(MaskedMatrix.full(data), row_basis, col_basis, cfg)
    return reconstruct(fm), report


def with_seed(cfg: FitConfig, seed: int) -> FitConfig:
    return replace(cfg, seed=seed)
