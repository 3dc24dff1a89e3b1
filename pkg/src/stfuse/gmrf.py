"""Sparse Gaussian Markov random field machinery.

Spatial precisions come from the finite-element discretization of the
Whittle-Matern operator (kappa^2 - Laplacian) applied twice (smoothness fixed
at nu = 1 in two dimensions), temporal precisions from a stationary AR(1), and
space-time precisions from their Kronecker combination.  All of them are
handled through :class:`SparsePrecision`, which owns a cached sparse
LDL^T-style factorization used for solves, sampling, log-determinants and
marginal variances.

The factorization backend is SuperLU run in symmetric mode with diagonal
pivoting disabled, which for a symmetric positive-definite matrix yields
P Q P^T = L D L^T; the Cholesky factor is L sqrt(D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import kv

from .mesh import FemMatrices


class FactorizationError(RuntimeError):
    """The matrix could not be factorized as symmetric positive definite."""


class ResourceLimitError(RuntimeError):
    """A requested operation exceeds the configured size cap."""


@dataclass(frozen=True)
class MaternParams:
    """Matern field parameters with smoothness fixed at nu = 1.

    ``kappa`` is derived from the range through rho = sqrt(8 nu) / kappa, the
    distance at which the correlation has dropped to about 0.1.
    """

    sigma2_omega: float
    rho: float
    nu: int = 1

    def __post_init__(self):
        if self.sigma2_omega <= 0:
            raise ValueError("sigma2_omega must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.nu != 1:
            raise ValueError("only nu = 1 is supported")

    @property
    def kappa(self) -> float:
        return math.sqrt(8.0 * self.nu) / self.rho


@dataclass(frozen=True)
class Ar1Params:
    """Stationary order-1 autoregression with unit innovation variance."""

    varsigma: float
    T: int

    def __post_init__(self):
        if not abs(self.varsigma) < 1.0:
            raise ValueError("|varsigma| must be < 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")


class SparsePrecision:
    """Symmetric positive-definite sparse precision with cached factorization.

    A factorized instance is immutable as far as callers are concerned and is
    safe for concurrent solve/sample use provided each caller brings its own
    random generator.  Factorization itself is lazy and must not race.
    """

    def __init__(self, matrix, check_symmetry: bool = True):
        m = sp.csc_matrix(matrix)
        if m.shape[0] != m.shape[1]:
            raise ValueError("precision matrix must be square")
        if check_symmetry:
            asym = abs(m - m.T)
            scale = max(1.0, abs(m).max())
            if asym.nnz and asym.max() > 1e-10 * scale:
                raise ValueError("precision matrix is not symmetric")
            m = (m + m.T) * 0.5
        self._m = m.tocsc()
        self._lu = None
        self._perm = None
        self._chol = None
        self._chol_t_solver = None
        self._logdet = None

    @property
    def matrix(self) -> sp.csc_matrix:
        return self._m

    @property
    def dim(self) -> int:
        return self._m.shape[0]

    def factor(self):
        """Factorize once; subsequent calls are no-ops."""
        if self._lu is not None:
            return self
        try:
            lu = splu(
                self._m,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise FactorizationError(str(exc)) from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise FactorizationError("symmetric factorization produced row pivoting")
        d = lu.U.diagonal()
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise FactorizationError("matrix is not positive definite")
        self._lu = lu
        self._perm = np.argsort(lu.perm_c)
        self._logdet = float(np.sum(np.log(d)))
        self._chol_diag_sqrt = np.sqrt(d)
        return self

    @property
    def logdet(self) -> float:
        self.factor()
        return self._logdet

    def solve(self, b, refine: int = 1) -> np.ndarray:
        """Solve Q x = b with a few steps of iterative refinement."""
        self.factor()
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        for _ in range(refine):
            r = b - self._m @ x
            x = x + self._lu.solve(r)
        return x

    def _chol_transpose_solver(self):
        # Lc = L sqrt(D); solving Lc^T y = w is a pure back-substitution, done
        # through SuperLU of the (already triangular) matrix for C speed.
        if self._chol_t_solver is None:
            self.factor()
            lc_t = (self._lu.L @ sp.diags(self._chol_diag_sqrt)).T.tocsc()
            self._chol_t_solver = splu(
                lc_t, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        return self._chol_t_solver

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Draw n independent N(0, Q^{-1}) vectors; deterministic given rng state.

        With s the fill-reducing permutation and Q[s][:, s] = Lc Lc^T, the draw
        is x[s] = Lc^{-T} z[s], so an identity precision returns the raw
        normals unchanged.
        """
        self.factor()
        z = rng.standard_normal((self.dim, n))
        y = self._chol_transpose_solver().solve(z[self._perm])
        x = np.empty_like(y)
        x[self._perm] = y
        return x[:, 0] if n == 1 else x

    def marginal_variances(self, indices=None, chunk: int = 256) -> np.ndarray:
        """diag(Q^{-1}) by column solves (adequate at the scales used here)."""
        self.factor()
        idx = np.arange(self.dim) if indices is None else np.asarray(indices)
        out = np.empty(len(idx), dtype=float)
        for start in range(0, len(idx), chunk):
            cols = idx[start : start + chunk]
            rhs = np.zeros((self.dim, len(cols)))
            rhs[cols, np.arange(len(cols))] = 1.0
            sol = self._lu.solve(rhs)
            out[start : start + len(cols)] = sol[cols, np.arange(len(cols))]
        return out

    def dense(self) -> np.ndarray:
        return self._m.toarray()

    def to_matrix_market(self, path) -> None:
        """Dump the matrix in Matrix Market coordinate format."""
        from scipy.io import mmwrite

        mmwrite(str(path), self._m.tocoo(), symmetry="symmetric")


def matern_cov(distance, p: MaternParams):
    """Matern covariance (nu = 1) as a function of distance.

    sigma2 * (kappa d) K_1(kappa d), continuous at d = 0 where it equals the
    marginal variance.
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    kd = p.kappa * d
    with np.errstate(invalid="ignore"):
        val = p.sigma2_omega * kd * kv(1, kd)
    val = np.where(kd == 0, p.sigma2_omega, val)
    return float(val) if np.isscalar(distance) else val


def spde_precision(fem: FemMatrices, p: MaternParams) -> SparsePrecision:
    """Finite-element precision of a Matern field (nu = 1, d = 2).

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G) with the lumped mass
    matrix, scaled by tau^2 = 1 / (4 pi kappa^2 sigma2) so the implied
    stationary marginal variance equals ``p.sigma2_omega``.
    """
    return SpdeBuilder(fem).precision(p)


class SpdeBuilder:
    """Caches the theta-independent pieces of the SPDE precision assembly."""

    def __init__(self, fem: FemMatrices):
        self.c = sp.diags(fem.mass_lumped).tocsc()
        self.g = fem.stiffness.tocsc()
        c_inv = sp.diags(1.0 / fem.mass_lumped)
        self.gcg = (self.g @ c_inv @ self.g).tocsc()

    def precision(self, p: MaternParams) -> SparsePrecision:
        k2 = p.kappa**2
        tau2 = 1.0 / (4.0 * math.pi * k2 * p.sigma2_omega)
        q = tau2 * (k2 * k2 * self.c + 2.0 * k2 * self.g + self.gcg)
        try:
            return SparsePrecision(q, check_symmetry=False).factor()
        except FactorizationError as exc:
            raise FactorizationError(
                f"SPDE precision assembly is not positive definite: {exc}"
            ) from exc


def ar1_precision(p: Ar1Params) -> SparsePrecision:
    """Tridiagonal precision of a stationary unit-innovation AR(1).

    T = 1 degenerates to the stationary marginal, precision 1 - varsigma^2.
    """
    v = p.varsigma
    if p.T == 1:
        return SparsePrecision(sp.csc_matrix(np.array([[1.0 - v * v]])))
    diag = np.full(p.T, 1.0 + v * v)
    diag[0] = diag[-1] = 1.0
    off = np.full(p.T - 1, -v)
    q = sp.diags([off, diag, off], [-1, 0, 1], format="csc")
    return SparsePrecision(q, check_symmetry=False)


def kron_precision(
    Qs: SparsePrecision, Qt: SparsePrecision, max_dim: int = 500_000
) -> SparsePrecision:
    """Space-time precision for the time-major stacking (xi_1^T ... xi_T^T)^T.

    Entry (t, d) of the stacked field sits at index t*D + d, so the combined
    precision is kron(Qt, Qs): time-outer, space-inner.
    """
    n = Qs.dim * Qt.dim
    if n > max_dim:
        raise ResourceLimitError(
            f"space-time dimension {n} exceeds the cap of {max_dim}"
        )
    return SparsePrecision(sp.kron(Qt.matrix, Qs.matrix, format="csc"), check_symmetry=False)


def sample(Q: SparsePrecision, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Draw from N(0, Q^{-1}); see :meth:`SparsePrecision.sample`."""
    return Q.sample(rng, n)


def marginal_variances(Q: SparsePrecision, indices=None) -> np.ndarray:
    """diag(Q^{-1}); see :meth:`SparsePrecision.marginal_variances`."""
    return Q.marginal_variances(indices)
