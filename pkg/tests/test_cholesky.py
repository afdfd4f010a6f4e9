"""Factorization correctness against dense linear algebra oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

from jointcast.cholesky import NotPositiveDefiniteError, SparseCholesky
from jointcast.graphs import build_area_graph, icar_structure
from jointcast.synthetic import grid_graph


def _lattice_precision(rows, cols, tau=3.7, ridge=0.5):
    lap = icar_structure(grid_graph(rows, cols)).entries
    return (tau * lap + ridge * sp.identity(lap.shape[0])).tocsc()


def test_solve_matches_dense():
    rng = np.random.default_rng(7)
    q = _lattice_precision(6, 7)
    chol = SparseCholesky(q)
    b = rng.standard_normal(q.shape[0])
    x = chol.solve(b)
    assert np.allclose(q @ x, b, atol=1e-10)


def test_block_solve():
    rng = np.random.default_rng(8)
    q = _lattice_precision(5, 5)
    chol = SparseCholesky(q)
    b = rng.standard_normal((q.shape[0], 4))
    x = chol.solve(b)
    assert x.shape == b.shape
    assert np.allclose(q @ x, b, atol=1e-10)


def test_logdet_matches_slogdet():
    for dims in [(3, 4), (8, 9)]:
        q = _lattice_precision(*dims)
        sign, ld = np.linalg.slogdet(q.toarray())
        assert sign > 0
        assert SparseCholesky(q).logdet() == pytest.approx(ld, rel=1e-12)


def test_half_factor_reconstructs_matrix():
    q = _lattice_precision(7, 6, tau=1.3, ridge=0.2)
    chol = SparseCholesky(q)
    recon = chol._half @ chol._half.T
    assert np.allclose(recon.toarray(), q.toarray(), atol=1e-12)


def test_sample_covariance():
    rng = np.random.default_rng(42)
    q = _lattice_precision(3, 3, tau=2.0, ridge=1.0)
    chol = SparseCholesky(q)
    draws = chol.sample_zero_mean(rng, size=40000)
    cov = np.cov(draws.T)
    target = np.linalg.inv(q.toarray())
    assert np.abs(cov - target).max() < 6e-3


def test_sample_seed_determinism():
    q = _lattice_precision(4, 4)
    a = SparseCholesky(q).sample_zero_mean(np.random.default_rng(3), size=5)
    b = SparseCholesky(q).sample_zero_mean(np.random.default_rng(3), size=5)
    assert np.array_equal(a, b)


def test_rejects_indefinite():
    g = build_area_graph(3, [(0, 1), (1, 2)])
    lap = icar_structure(g).entries  # singular
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(lap.tocsc())
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(sp.diags([1.0, -2.0, 3.0]).tocsc())
