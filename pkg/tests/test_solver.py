import numpy as np
import pytest

from graphfm.errors import DivergenceError, SizeError
from graphfm.solver import (FitConfig, FunctionalMap, MaskedMatrix, commutativity_reg,
                            commutativity_weights, data_term, fit, gradient, init_map,
                            objective, reconstruct, reduce_dimension)
from graphfm.spectral import SpectralBasis, smallest_eigenpairs
from graphfm.synth import basis_consistent_matrix, sample_mask
from oracles import (commutativity_loop, dense_laplacian, masked_sq_loop, numerical_rank,
                     random_weighted_graph)


def _basis(rng, n, k, p=0.5):
    return smallest_eigenpairs(dense_laplacian(random_weighted_graph(rng, n, p)), k)


def _problem(seed, m=12, n=15, kr=4, kc=5, density=0.5, pq=False):
    rng = np.random.default_rng(seed)
    rb, cb = _basis(rng, m, kr), _basis(rng, n, kc)
    M = rng.standard_normal((m, n))
    S = rng.random((m, n)) < density
    C = rng.standard_normal((kr, kc))
    P = np.eye(kr) + 0.3 * rng.standard_normal((kr, kr)) if pq else None
    Q = np.eye(kc) + 0.3 * rng.standard_normal((kc, kc)) if pq else None
    return FunctionalMap(rb, cb, C, P, Q), MaskedMatrix(M, S)


def test_masked_matrix_contract():
    mm = MaskedMatrix(np.array([[1.0, np.nan], [3.0, 4.0]]), np.array([[1, 0], [1, 1]]))
    assert mm.values[0, 1] == 0.0 and mm.n_observed == 3
    with pytest.raises(ValueError):
        MaskedMatrix(np.array([[np.nan]]), np.array([[1]]))
    with pytest.raises(ValueError):
        MaskedMatrix(np.zeros((1, 1)), np.array([[2]]))
    with pytest.raises(SizeError):
        MaskedMatrix(np.zeros((2, 2)), np.zeros((2, 3)))


def test_init_recovers_coefficients():
    rng = np.random.default_rng(0)
    rb, cb = _basis(rng, 10, 4), _basis(rng, 8, 3)
    C0 = rng.standard_normal((4, 3))
    M = rb.vectors @ C0 @ cb.vectors.T
    fm = init_map(rb, cb, MaskedMatrix.full(M))
    np.testing.assert_allclose(fm.C, C0, atol=1e-8)
    empty = init_map(rb, cb, MaskedMatrix(M, np.zeros(M.shape, dtype=bool)))
    assert not np.any(empty.C)


def test_init_constant_bases():
    rng = np.random.default_rng(1)
    m, n = 6, 9
    rb, cb = _basis(rng, m, 1, p=1.0), _basis(rng, n, 1, p=1.0)
    M = rng.standard_normal((m, n))
    S = rng.random((m, n)) < 0.4
    fm = init_map(rb, cb, MaskedMatrix(M, S))
    assert fm.C[0, 0] == pytest.approx(np.sum(M * S) / np.sqrt(m * n), abs=1e-12)


def test_data_term_examples():
    fm, mm = _problem(2)
    X = reconstruct(fm)
    assert data_term(fm, MaskedMatrix(X, mm.mask)) == pytest.approx(0.0, abs=1e-24)
    S = np.zeros(mm.shape, dtype=bool)
    S[3, 4] = True
    M = X.copy()
    M[3, 4] -= 0.25
    assert data_term(fm, MaskedMatrix(M, S)) == pytest.approx(0.0625, rel=1e-12)
    for seed in range(10):
        fm, mm = _problem(seed, pq=bool(seed % 2))
        ref = masked_sq_loop(reconstruct(fm), mm.values, mm.mask)
        assert data_term(fm, mm) == pytest.approx(ref, rel=1e-12)


def test_commutativity_examples():
    rng = np.random.default_rng(3)
    lam = np.sort(rng.random(4))
    b = SpectralBasis(np.eye(4), lam)
    diag = FunctionalMap(b, b, np.diag(rng.standard_normal(4)))
    assert commutativity_reg(diag) == 0.0
    assert commutativity_reg(FunctionalMap(b, b, np.eye(4))) == 0.0

    lr, lc = np.sort(rng.random(4)), np.sort(rng.random(4))
    rb, cb = SpectralBasis(np.eye(4), lr), SpectralBasis(np.eye(4), lc)
    for i in range(4):
        for j in range(4):
            C = np.zeros((4, 4))
            C[i, j] = 1.7
            want = 1.7 ** 2 * (lr[j] - lc[i]) ** 2
            assert commutativity_reg(FunctionalMap(rb, cb, C)) == pytest.approx(want, rel=1e-12)
    C = rng.standard_normal((4, 4))
    assert commutativity_reg(FunctionalMap(rb, cb, C)) == pytest.approx(
        commutativity_loop(C, lr, lc), rel=1e-12)


def test_commutativity_rectangular_orientation():
    W = commutativity_weights([0.0, 1.0, 2.0], [0.0, 5.0])
    assert W.shape == (3, 2)
    assert W[2, 1] == 2.0 - 5.0


def test_objective_composition():
    for seed in range(5):
        fm, mm = _problem(seed, m=8, n=8, kr=4, kc=4, pq=True)
        mu = 0.37
        want = masked_sq_loop(reconstruct(fm), mm.values, mm.mask) + mu * commutativity_loop(
            fm.C, fm.row_basis.values, fm.col_basis.values)
        assert objective(fm, mm, mu) == pytest.approx(want, rel=1e-12)
        assert objective(fm, mm, 0.0) == data_term(fm, mm)


def _fd_check(fm, mm, mu, h=1e-5):
    g = gradient(fm, mm, mu)
    params = {"C": fm.C, "P": fm.P, "Q": fm.Q}
    worst = 0.0
    for name in g:
        base = params[name]
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = objective(fm.with_params(**{**params, name: plus}), mm, mu)
            fmn = objective(fm.with_params(**{**params, name: minus}), mm, mu)
            num[idx] = (fp - fmn) / (2 * h)
        worst = max(worst, np.linalg.norm(g[name] - num) / max(np.linalg.norm(num), 1e-12))
    return worst


def test_gradient_matches_finite_differences():
    for seed in range(20):
        fm, mm = _problem(seed, m=9, n=10, kr=3, kc=4 if seed % 3 else 3, pq=seed % 2 == 0)
        assert _fd_check(fm, mm, mu=0.5) <= 1e-5


def test_gradient_mu0_closed_form():
    fm, mm = _problem(5, pq=True)
    R = np.where(mm.mask, reconstruct(fm) - mm.values, 0.0)
    Phi, Psi = fm.row_basis.vectors, fm.col_basis.vectors
    want = 2 * fm.P.T @ Phi.T @ R @ Psi @ fm.Q
    np.testing.assert_allclose(gradient(fm, mm, 0.0)["C"], want, atol=1e-12)
    assert _fd_check(fm, mm, 0.0) <= 1e-5


def test_gradient_vanishes_at_minimum():
    rng = np.random.default_rng(6)
    rb, cb = _basis(rng, 10, 3), _basis(rng, 12, 3)
    C0 = rng.standard_normal((3, 3))
    M = rb.vectors @ C0 @ cb.vectors.T
    g = gradient(FunctionalMap(rb, cb, C0), MaskedMatrix.full(M), 0.0)
    assert np.linalg.norm(g["C"]) <= 1e-8


def test_objective_convex_in_C():
    fm, mm = _problem(8)
    rng = np.random.default_rng(8)
    C2 = rng.standard_normal(fm.C.shape)
    for t in np.linspace(0, 1, 11):
        mid = objective(fm.with_params(t * fm.C + (1 - t) * C2), mm, 0.1)
        chord = t * objective(fm, mm, 0.1) + (1 - t) * objective(fm.with_params(C2), mm, 0.1)
        assert mid <= chord + 1e-10


def test_plain_descent_is_monotone():
    fm, mm = _problem(9, m=20, n=25, kr=5, kc=5, density=0.4)
    cfg = FitConfig(mu=0.01, optimizer="plain_gd", learning_rate=1e-2, max_iters=300,
                    val_fraction=0.0, eval_every=50)
    _, rep = fit(mm, fm.row_basis, fm.col_basis, cfg)
    assert np.all(np.diff(rep.train_objective) <= 1e-12)


def test_exact_recovery_with_enough_samples():
    """Noise-free basis-consistent data is recovered when samples >> k^2."""
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rb, cb = _basis(rng, 40, 5), _basis(rng, 50, 5)
        X0 = basis_consistent_matrix(rb, cb, 3, rng)
        # 200 samples, twice the 4 k^2 threshold
        S = sample_mask(40, 50, 0.1, rng)
        fm, _ = fit(MaskedMatrix(np.where(S, X0, 0.0), S), rb, cb,
                    FitConfig(mu=0.0, val_fraction=0.05, learning_rate=1e-2, seed=seed))
        err = np.sqrt(np.mean((reconstruct(fm) - X0)[~S] ** 2))
        hits += err <= 1e-6 * np.sqrt(np.mean(X0 ** 2))
    assert hits >= 9


def test_reconstruction_rank_bounded():
    for seed in range(10):
        fm, mm = _problem(seed, m=15, n=18, kr=3, kc=6, pq=bool(seed % 2))
        assert numerical_rank(reconstruct(fm)) <= 3
        fitted, _ = fit(mm, fm.row_basis, fm.col_basis,
                        FitConfig(max_iters=200, use_pq=bool(seed % 2), val_fraction=0.1))
        assert numerical_rank(reconstruct(fitted)) <= 3


def test_reconstruct_examples():
    rng = np.random.default_rng(10)
    rb, cb = _basis(rng, 6, 6), _basis(rng, 7, 7)
    assert not np.any(reconstruct(FunctionalMap(rb, cb, np.zeros((6, 7)))))
    M = rng.standard_normal((6, 7))
    C = rb.vectors.T @ M @ cb.vectors
    np.testing.assert_allclose(reconstruct(FunctionalMap(rb, cb, C)), M, atol=1e-8)


def test_fit_fully_observed_consistent():
    rng = np.random.default_rng(12)
    rb, cb = _basis(rng, 30, 6), _basis(rng, 35, 6)
    X0 = basis_consistent_matrix(rb, cb, 6, rng)
    fm, rep = fit(MaskedMatrix.full(X0), rb, cb, FitConfig(mu=0.0, val_fraction=0.0))
    assert data_term(fm, MaskedMatrix.full(X0)) <= 1e-10


def test_fit_mu0_is_deterministic():
    fm, mm = _problem(13, m=20, n=20, kr=4, kc=4)
    cfg = FitConfig(mu=0.0, max_iters=500)
    a, ra = fit(mm, fm.row_basis, fm.col_basis, cfg)
    b, rb = fit(mm, fm.row_basis, fm.col_basis, cfg)
    assert np.array_equal(a.C, b.C)
    assert ra.payload() == rb.payload()
    assert ra.label == "ours_fm"


def test_fit_errors():
    fm, mm = _problem(14)
    with pytest.raises(ValueError):
        fit(MaskedMatrix(mm.values, np.zeros(mm.shape, dtype=bool)), fm.row_basis, fm.col_basis)
    with pytest.raises(DivergenceError) as err:
        fit(mm, fm.row_basis, fm.col_basis,
            FitConfig(optimizer="plain_gd", learning_rate=1e6, max_iters=1000))
    assert err.value.iteration > 0
    with pytest.raises(SizeError):
        fit(MaskedMatrix.full(np.zeros((3, 3))), fm.row_basis, fm.col_basis)
    with pytest.raises(ValueError):
        FitConfig(mu=-1.0)
    with pytest.raises(ValueError):
        FitConfig(optimizer="sgd")


def test_energy_backends_agree():
    """The fast evaluator picks a backend by support size; all give the same fit."""
    rng = np.random.default_rng(15)
    rb, cb = _basis(rng, 30, 4), _basis(rng, 30, 4)
    X0 = basis_consistent_matrix(rb, cb, 4, rng)
    for density in (0.01, 0.3, 1.0):
        S = sample_mask(30, 30, density, rng)
        mm = MaskedMatrix(np.where(S, X0, 0.0), S)
        fm, rep = fit(mm, rb, cb, FitConfig(max_iters=50, val_fraction=0.0, mu=0.1, use_pq=True))
        ref = objective(fm, mm, 0.1)
        assert rep.metrics["final_objective"] == pytest.approx(ref, rel=1e-9, abs=1e-14)


def test_reduce_dimension_examples():
    rng = np.random.default_rng(16)
    rb, cb = _basis(rng, 20, 5), _basis(rng, 25, 5)
    X0 = basis_consistent_matrix(rb, cb, 5, rng)
    X, _ = reduce_dimension(X0, rb, cb)
    np.testing.assert_allclose(X, X0, atol=1e-6)
    noisy = rng.standard_normal((20, 25))
    Xr, _ = reduce_dimension(noisy, rb.truncate(3), cb)
    assert numerical_rank(Xr) <= 3


def test_reduce_dimension_keeps_separated_blobs():
    from graphfm.graphs import knn_graph, laplacian, standardize_features
    from graphfm.metrics import purity_protocol

    rng = np.random.default_rng(17)
    X = np.vstack([rng.standard_normal((30, 12)) + 8.0, rng.standard_normal((30, 12)) - 8.0])
    y = np.repeat([0, 1], 30)
    Z = standardize_features(X)
    rb = smallest_eigenpairs(laplacian(knn_graph(Z.T, 5)), 10)
    cb = smallest_eigenpairs(laplacian(knn_graph(Z, 5)), 10)
    R, _ = reduce_dimension(Z.T, rb, cb)
    after = purity_protocol(R.T, y, 2).max
    assert after >= purity_protocol(Z, y, 2).max - 0.01
