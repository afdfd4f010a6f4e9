"""Sparse symmetric factorization used for Gaussian field solves and sampling.

SuperLU in symmetric mode with diagonal pivoting disabled produces, for a
symmetric positive definite matrix, an LU factorization whose row and column
permutations coincide and whose upper factor satisfies ``U = D L^T``.  That
turns the LU into a permuted Cholesky ``Q[p][:, p] = L D L^T`` with a
fill-reducing (minimum degree) ordering, which is all the sampler needs:
solves, log-determinant, and zero-mean Gaussian draws reusing one
factorization.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class NotPositiveDefiniteError(ValueError):
    """Raised when the matrix handed to SparseCholesky is not SPD."""


class SparseCholesky:
    """Factor a sparse SPD matrix once; reuse for solves, logdet and sampling.

    Parameters
    ----------
    matrix : scipy sparse matrix
        Symmetric positive definite.
    """

    def __init__(self, matrix):
        q = matrix if sp.issparse(matrix) and matrix.format == "csc" else sp.csc_matrix(matrix)
        if q.shape[0] != q.shape[1]:
            raise ValueError("matrix must be square")
        self.dim = q.shape[0]
        try:
            self._lu = spla.splu(
                q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # singular to machine precision
            raise NotPositiveDefiniteError(str(exc)) from exc
        d = self._lu.U.diagonal()
        if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
            raise NotPositiveDefiniteError("non-positive pivot encountered")
        self._pivots = d
        self._half_cache = None

    @property
    def _half(self) -> sp.csr_matrix:
        # Q = C C^T with C = row-unpermuted L sqrt(D); used for sampling via
        # x = Q^{-1} C z which has covariance Q^{-1}.  Built on first use:
        # most factorizations only ever solve.
        if self._half_cache is None:
            half = self._lu.L @ sp.diags(np.sqrt(self._pivots))
            self._half_cache = half.tocsr()[self._lu.perm_c, :]
        return self._half_cache

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``Q x = rhs``; rhs may be a vector or a (dim, k) block."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return self._lu.solve(rhs)
        return self._lu.solve(np.ascontiguousarray(rhs))

    def logdet(self) -> float:
        """Log-determinant of the factored matrix."""
        return float(np.log(self._pivots).sum())

    def sample_zero_mean(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from N(0, Q^{-1}).

        Returns a vector for ``size=None``, else an array of shape
        ``(size, dim)``.  Consumes ``dim`` (or ``size * dim``) normals from
        ``rng`` in a fixed order, so draws are reproducible by seed.
        """
        if size is None:
            z = rng.standard_normal(self.dim)
            return self._lu.solve(self._half @ z)
        z = rng.standard_normal((size, self.dim))
        return self._lu.solve((self._half @ z.T)).T
