"""First-stage fusion model: monitors and a proxy grid sharing one latent field.

Monitors observe the true exposure surface directly with noise; the proxy grid
observes an affinely calibrated, noisier version of it.  Both are tied to one
space-time Markov random field through an augmented Gaussian system:

* data rows for the monitor series and the proxy series,
* pseudo-zero rows forcing the structural equation
  x_t = beta0 + beta1 z_t + B xi_t at a large fixed precision,
* copy rows tying the duplicated latent x* to x (monitors) and to
  alpha1 * x (proxy cells) at a large fixed precision.

Everything is Gaussian given the hyperparameters, so the latent field
integrates out exactly; hyperparameters are estimated by maximizing the
resulting marginal posterior in transformed coordinates, optionally followed
by a small axis-aligned grid for integration weights.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import priors as priormod
from ._optim import OptimizationError, maximize
from .gmrf import (
    Ar1Params,
    FactorizationError,
    MaternParams,
    SparsePrecision,
    SpdeBuilder,
    ar1_precision,
)
from .mesh import Projector, TriangularMesh, as_points, assemble_fem, build_projector

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

HYPER_NAMES = ("alpha1", "sigma2_e", "sigma2_delta", "varsigma", "sigma2_omega", "rho")
FIXED_NAMES = ("alpha0", "beta0", "beta1")


class Stage1Error(RuntimeError):
    """Fit failure; carries the best hyperparameters seen and the gradient norm."""

    def __init__(self, message, best_hyper=None, grad_norm=None):
        super().__init__(message)
        self.best_hyper = best_hyper
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class ObservationSet:
    """Monitor series, proxy grid series and the shared covariate.

    ``z`` is aligned to (monitors, centroids): its first M rows belong to the
    monitor locations, the remaining G rows to the proxy-grid centroids.
    """

    monitor_locations: np.ndarray  # (M, 2)
    w: np.ndarray  # (M, T)
    proxy_centroids: np.ndarray  # (G, 2)
    x_tilde: np.ndarray  # (G, T)
    z: np.ndarray  # (M+G, T)

    def __post_init__(self):
        ml = as_points(self.monitor_locations)
        pc = as_points(self.proxy_centroids)
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        xt = np.atleast_2d(np.asarray(self.x_tilde, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        M, G = len(ml), len(pc)
        if M < 1 or G < 1:
            raise ValueError("need at least one monitor and one proxy cell")
        if w.shape[0] != M or xt.shape[0] != G:
            raise ValueError("w/x_tilde row counts must match location counts")
        if w.shape[1] != xt.shape[1]:
            raise ValueError("w and x_tilde must share the time dimension")
        if z.shape != (M + G, w.shape[1]):
            raise ValueError(f"z must have shape {(M + G, w.shape[1])}, got {z.shape}")
        for name, arr in (("w", w), ("x_tilde", xt), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "monitor_locations", ml)
        object.__setattr__(self, "proxy_centroids", pc)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x_tilde", xt)
        object.__setattr__(self, "z", z)

    @property
    def n_monitors(self) -> int:
        return len(self.monitor_locations)

    @property
    def n_cells(self) -> int:
        return len(self.proxy_centroids)

    @property
    def n_times(self) -> int:
        return self.w.shape[1]

    def all_locations(self) -> np.ndarray:
        return np.vstack([self.monitor_locations, self.proxy_centroids])


@dataclass(frozen=True)
class Stage1Hyper:
    """Hyperparameters of the fusion model."""

    alpha1: float
    sigma2_e: float
    sigma2_delta: float
    varsigma: float
    sigma2_omega: float
    rho: float

    def __post_init__(self):
        if min(self.sigma2_e, self.sigma2_delta, self.sigma2_omega) <= 0:
            raise ValueError("variances must be positive")
        if not abs(self.varsigma) < 1:
            raise ValueError("|varsigma| must be < 1")
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in HYPER_NAMES])

    def to_transformed(self) -> np.ndarray:
        return np.array(
            [
                self.alpha1,
                math.log(self.sigma2_e),
                math.log(self.sigma2_delta),
                priormod.ar_transform(self.varsigma),
                math.log(self.sigma2_omega),
                math.log(self.rho),
            ]
        )

    @staticmethod
    def from_transformed(t) -> "Stage1Hyper":
        return Stage1Hyper(
            alpha1=float(t[0]),
            sigma2_e=math.exp(t[1]),
            sigma2_delta=math.exp(t[2]),
            varsigma=priormod.ar_transform_inv(float(t[3])),
            sigma2_omega=math.exp(t[4]),
            rho=math.exp(t[5]),
        )


@dataclass(frozen=True)
class Stage1Fixed:
    alpha0: float
    beta0: float
    beta1: float


@dataclass(frozen=True)
class FixedPrecisions:
    """Fixed precisions of the augmentation device.

    Pseudo-zeros and copies are near-constraints (large precision); the latent
    x block gets a diffuse proper prior (small precision).  Defaults keep
    constraint slack around 1e-4 on the data scale while the posterior system
    stays factorizable in double precision.
    """

    tau0: float = 1e8
    tau_xstar: float = 1e8
    tau_x: float = 1e-6

    def __post_init__(self):
        if min(self.tau0, self.tau_xstar, self.tau_x) <= 0:
            raise ValueError("fixed precisions must be positive")


class Stage1Priors:
    """Hyperparameter prior: flat, non-informative, or informative (PC-based).

    Densities are over the original parameter space (see :mod:`stfuse.priors`).
    """

    def __init__(self, kind, center=None, alpha=0.05, alpha1_sd=0.1, variance_rel_sd=0.1, ar_sd=0.15):
        if kind not in ("flat", "non_informative", "informative"):
            raise ValueError(f"unknown prior kind {kind!r}")
        if kind == "informative" and center is None:
            raise ValueError("informative priors need a center")
        self.kind = kind
        self.center = center
        self.alpha = alpha
        self.alpha1_sd = alpha1_sd
        self.variance_rel_sd = variance_rel_sd
        self.ar_sd = ar_sd

    @classmethod
    def flat(cls):
        return cls("flat")

    @classmethod
    def non_informative(cls):
        return cls("non_informative")

    @classmethod
    def informative(cls, center: Stage1Hyper, alpha: float = 0.05, **kw):
        return cls("informative", center=center, alpha=alpha, **kw)

    def log_density(self, h: Stage1Hyper) -> float:
        if not abs(h.varsigma) < 1 or min(h.sigma2_e, h.sigma2_delta, h.sigma2_omega, h.rho) <= 0:
            return -np.inf
        if self.kind == "flat":
            return 0.0
        if self.kind == "non_informative":
            return (
                priormod.normal_logpdf(h.alpha1, 0.0, 1000.0)
                + priormod.gamma_precision_logpdf(h.sigma2_e, 1.0, 5e-5)
                + priormod.gamma_precision_logpdf(h.sigma2_delta, 1.0, 5e-5)
                + priormod.ar_transformed_normal_logpdf(h.varsigma, 0.0, self.ar_sd)
                + priormod.spde_internal_gaussian_logpdf(h.sigma2_omega, h.rho)
            )
        c = self.center
        rel = self.variance_rel_sd
        shape = 2.0 + 1.0 / rel**2
        return (
            priormod.normal_logpdf(h.alpha1, c.alpha1, self.alpha1_sd**2)
            + priormod.inverse_gamma_logpdf(h.sigma2_e, shape, (shape - 1.0) * c.sigma2_e)
            + priormod.inverse_gamma_logpdf(h.sigma2_delta, shape, (shape - 1.0) * c.sigma2_delta)
            + priormod.ar_transformed_normal_logpdf(
                h.varsigma, priormod.ar_transform(c.varsigma), self.ar_sd
            )
            + priormod.pc_matern_logpdf(
                h.sigma2_omega, h.rho, math.sqrt(c.sigma2_omega), c.rho, self.alpha
            )
        )


@dataclass(frozen=True)
class LatentIndex:
    """Positions of the latent blocks in the stacked vector (x, x*, xi, fixed)."""

    n_sites: int
    n_times: int
    n_nodes: int

    @property
    def n_x(self) -> int:
        return self.n_sites * self.n_times

    @property
    def xi_offset(self) -> int:
        return 2 * self.n_x

    @property
    def size(self) -> int:
        return 2 * self.n_x + self.n_nodes * self.n_times + 3

    @property
    def x(self) -> slice:
        return slice(0, self.n_x)

    @property
    def x_star(self) -> slice:
        return slice(self.n_x, 2 * self.n_x)

    @property
    def xi(self) -> slice:
        return slice(self.xi_offset, self.xi_offset + self.n_nodes * self.n_times)

    @property
    def alpha0(self) -> int:
        return self.size - 3

    @property
    def beta0(self) -> int:
        return self.size - 2

    @property
    def beta1(self) -> int:
        return self.size - 1

    def x_entry(self, t, i) -> int:
        return t * self.n_sites + i

    def xi_entry(self, t, d) -> int:
        return self.xi_offset + t * self.n_nodes + d


@dataclass
class AugmentedSystem:
    """The stacked Gaussian linear model for one hyperparameter value.

    ``design`` holds data, pseudo-zero and copy rows (in that order);
    ``prior_precision`` covers the remaining prior pieces (diffuse x prior,
    space-time field, fixed effects).  The posterior precision is
    prior_precision + design^T V^{-1} design.
    """

    design: sp.csr_matrix
    response: np.ndarray
    noise_variance: np.ndarray
    prior_precision: sp.csc_matrix
    index: LatentIndex

    def posterior(self) -> tuple:
        """(factorized posterior precision, posterior mean)."""
        a = self.design.tocsc()
        v_inv = sp.diags(1.0 / self.noise_variance)
        q = SparsePrecision(
            self.prior_precision + (a.T @ v_inv @ a), check_symmetry=False
        ).factor()
        b = a.T @ (self.response / self.noise_variance)
        return q, q.solve(b)


class _SystemBuilder:
    """Caches the hyperparameter-independent pieces of the augmented system."""

    def __init__(self, obs, mesh, projector, fp, fixed_prior_variance=1000.0):
        M, G, T = obs.n_monitors, obs.n_cells, obs.n_times
        S = M + G
        D = mesh.n_vertices
        if projector.matrix.shape != (S, D):
            raise ValueError(
                f"projector must map {D} mesh nodes to the {S} observation sites"
            )
        self.obs = obs
        self.mesh = mesh
        self.fp = fp
        self.fixed_prior_variance = fixed_prior_variance
        self.idx = LatentIndex(n_sites=S, n_times=T, n_nodes=D)
        idx = self.idx
        n = idx.size

        B = projector.matrix.tocoo()

        # data rows: monitors then proxy, time-major inside each group
        rows, cols, vals = [], [], []
        for t in range(T):
            for i in range(M):
                r = t * M + i
                rows.append(r)
                cols.append(idx.n_x + idx.x_entry(t, i))
                vals.append(1.0)
        a_w = sp.csr_matrix((vals, (rows, cols)), shape=(M * T, n))

        rows, cols, vals = [], [], []
        for t in range(T):
            for g in range(G):
                r = t * G + g
                rows.append(r)
                cols.append(idx.n_x + idx.x_entry(t, M + g))
                vals.append(1.0)
                rows.append(r)
                cols.append(idx.alpha0)
                vals.append(1.0)
        a_p = sp.csr_matrix((vals, (rows, cols)), shape=(G * T, n))

        # pseudo-zero rows: 0 = -x_t + beta0 + beta1 z_t + B xi_t
        rows, cols, vals = [], [], []
        for t in range(T):
            for i in range(S):
                r = t * S + i
                rows.append(r)
                cols.append(idx.x_entry(t, i))
                vals.append(-1.0)
                rows.append(r)
                cols.append(idx.beta0)
                vals.append(1.0)
                rows.append(r)
                cols.append(idx.beta1)
                vals.append(float(obs.z[i, t]))
        for t in range(T):
            rows.extend((t * S + B.row).tolist())
            cols.extend((idx.xi_offset + t * D + B.col).tolist())
            vals.extend(B.data.tolist())
        a_z = sp.csr_matrix((vals, (rows, cols)), shape=(S * T, n))

        # copy rows: x*(t, i) - x(t, i) for monitors; x*(t, i) - alpha1 x(t, i)
        # for proxy sites.  Split so the alpha1 dependence stays a scalar.
        rows, cols, vals = [], [], []
        rows1, cols1, vals1 = [], [], []
        for t in range(T):
            for i in range(S):
                r = t * S + i
                rows.append(r)
                cols.append(idx.n_x + idx.x_entry(t, i))
                vals.append(1.0)
                if i < M:
                    rows.append(r)
                    cols.append(idx.x_entry(t, i))
                    vals.append(-1.0)
                else:
                    rows1.append(r)
                    cols1.append(idx.x_entry(t, i))
                    vals1.append(-1.0)
        k0 = sp.csr_matrix((vals, (rows, cols)), shape=(S * T, n))
        k1 = sp.csr_matrix((vals1, (rows1, cols1)), shape=(S * T, n))
        self._a_w, self._a_p, self._a_z, self._k0, self._k1 = a_w, a_p, a_z, k0, k1

        self._gram_w = (a_w.T @ a_w).tocsc()
        self._gram_p = (a_p.T @ a_p).tocsc()
        self._gram_z = (a_z.T @ a_z).tocsc()
        self._c00 = (k0.T @ k0).tocsc()
        self._c01 = (k0.T @ k1 + k1.T @ k0).tocsc()
        self._c11 = (k1.T @ k1).tocsc()

        self._w_vec = obs.w.T.ravel()
        self._p_vec = obs.x_tilde.T.ravel()
        self._b_w = a_w.T @ self._w_vec
        self._b_p = a_p.T @ self._p_vec
        self._w_sq = float(self._w_vec @ self._w_vec)
        self._p_sq = float(self._p_vec @ self._p_vec)

        fixed_prec = 1.0 / fixed_prior_variance
        base_diag = np.zeros(n)
        base_diag[idx.x] = fp.tau_x
        base_diag[-3:] = fixed_prec
        self._base = sp.diags(base_diag).tocsc()

        self._spde = SpdeBuilder(assemble_fem(mesh))
        self._logdet_const = (
            idx.n_x * math.log(fp.tau_x)
            + idx.n_x * math.log(fp.tau_xstar)
            + 3 * math.log(fixed_prec)
        )
        self._n_obs = 2 * S * T
        self._kron_cache = {}

    def _field_precisions(self, hyper):
        key = (hyper.varsigma, hyper.sigma2_omega, hyper.rho)
        if key not in self._kron_cache:
            qs = self._spde.precision(
                MaternParams(sigma2_omega=hyper.sigma2_omega, rho=hyper.rho)
            )
            qt = ar1_precision(Ar1Params(varsigma=hyper.varsigma, T=self.idx.n_times))
            self._kron_cache.clear()  # keep a single entry; evals rarely repeat
            self._kron_cache[key] = (qs, qt)
        return self._kron_cache[key]

    def _copy_gram(self, alpha1):
        return self._c00 + alpha1 * self._c01 + alpha1**2 * self._c11

    def assemble(self, hyper) -> AugmentedSystem:
        idx = self.idx
        qs, qt = self._field_precisions(hyper)
        kron = sp.kron(qt.matrix, qs.matrix, format="coo")
        n = idx.size
        field = sp.csc_matrix(
            (kron.data, (kron.row + idx.xi_offset, kron.col + idx.xi_offset)),
            shape=(n, n),
        )
        design = sp.vstack(
            [self._a_w, self._a_p, self._a_z, self._k0 + hyper.alpha1 * self._k1],
            format="csr",
        )
        S, T, M, G = idx.n_sites, idx.n_times, self.obs.n_monitors, self.obs.n_cells
        noise = np.concatenate(
            [
                np.full(M * T, hyper.sigma2_e),
                np.full(G * T, hyper.sigma2_delta),
                np.full(S * T, 1.0 / self.fp.tau0),
                np.full(S * T, 1.0 / self.fp.tau_xstar),
            ]
        )
        y = np.concatenate([self._w_vec, self._p_vec, np.zeros(2 * S * T)])
        prior = self._base + field
        return AugmentedSystem(
            design=design,
            response=y,
            noise_variance=noise,
            prior_precision=prior,
            index=idx,
        )

    def posterior_pieces(self, hyper):
        """(Q_post factorized, b, mean) plus the scalars entering the marginal."""
        idx = self.idx
        fp = self.fp
        qs, qt = self._field_precisions(hyper)
        kron = sp.kron(qt.matrix, qs.matrix, format="coo")
        n = idx.size
        field = sp.csc_matrix(
            (kron.data, (kron.row + idx.xi_offset, kron.col + idx.xi_offset)),
            shape=(n, n),
        )
        q_chi = self._base + field + fp.tau_xstar * self._copy_gram(hyper.alpha1)
        q_post_m = (
            q_chi
            + self._gram_w / hyper.sigma2_e
            + self._gram_p / hyper.sigma2_delta
            + fp.tau0 * self._gram_z
        )
        q_post = SparsePrecision(q_post_m, check_symmetry=False).factor()
        b = self._b_w / hyper.sigma2_e + self._b_p / hyper.sigma2_delta
        mean = q_post.solve(b)
        logdet_chi = (
            self._logdet_const + idx.n_times * qs.logdet + idx.n_nodes * qt.logdet
        )
        quad = self._w_sq / hyper.sigma2_e + self._p_sq / hyper.sigma2_delta
        return q_post, b, mean, logdet_chi, quad

    def log_marginal_likelihood(self, hyper) -> float:
        M, G, S, T = (
            self.obs.n_monitors,
            self.obs.n_cells,
            self.idx.n_sites,
            self.idx.n_times,
        )
        try:
            q_post, b, mean, logdet_chi, quad = self.posterior_pieces(hyper)
        except FactorizationError as exc:
            logger.debug("hyperparameter region infeasible (%s): %s", hyper, exc)
            return -np.inf
        log_noise = (
            M * T * math.log(hyper.sigma2_e)
            + G * T * math.log(hyper.sigma2_delta)
            - S * T * math.log(self.fp.tau0)
        )
        return (
            -0.5 * self._n_obs * LOG_2PI
            - 0.5 * log_noise
            + 0.5 * logdet_chi
            - 0.5 * q_post.logdet
            - 0.5 * (quad - float(b @ mean))
        )


def assemble_system(
    obs: ObservationSet,
    mesh: TriangularMesh,
    projector: Projector,
    hyper: Stage1Hyper,
    fixed_precisions: FixedPrecisions = FixedPrecisions(),
    fixed_prior_variance: float = 1000.0,
) -> AugmentedSystem:
    """Build the augmented Gaussian linear model for given hyperparameters."""
    builder = _SystemBuilder(obs, mesh, projector, fixed_precisions, fixed_prior_variance)
    return builder.assemble(hyper)


def log_marginal(
    obs: ObservationSet,
    mesh: TriangularMesh,
    projector: Projector,
    hyper: Stage1Hyper,
    fixed_precisions: FixedPrecisions = FixedPrecisions(),
    priors: Stage1Priors | None = None,
    fixed_prior_variance: float = 1000.0,
) -> float:
    """log prior(theta) + log of the Gaussian marginal likelihood of (w, x~, 0).

    The latent field is integrated out analytically through sparse Cholesky
    log-determinants.  Infeasible hyperparameters give -inf.
    """
    priors = priors or Stage1Priors.flat()
    lp = priors.log_density(hyper)
    if not np.isfinite(lp):
        return -np.inf
    builder = _SystemBuilder(obs, mesh, projector, fixed_precisions, fixed_prior_variance)
    return lp + builder.log_marginal_likelihood(hyper)


@dataclass
class Stage1Config:
    """Fit configuration: priors, augmentation precisions, optimizer budgets."""

    priors: Stage1Priors = field(default_factory=Stage1Priors.non_informative)
    fixed_precisions: FixedPrecisions = field(default_factory=FixedPrecisions)
    fixed_prior_variance: float = 1000.0
    init: Stage1Hyper | None = None
    coord_budget: int = 200
    nm_maxiter: int = 400
    tol: float = 1e-4
    hyper_mode: str = "mode"  # "mode" (plug-in) or "grid" (axis-aligned weights)
    grid_step: float = 0.7

    def __post_init__(self):
        if self.hyper_mode not in ("mode", "grid"):
            raise ValueError("hyper_mode must be 'mode' or 'grid'")


@dataclass
class GridPoint:
    hyper: Stage1Hyper
    weight: float
    posterior: SparsePrecision
    mean: np.ndarray


@dataclass
class Stage1Fit:
    """Mode hyperparameters plus the conditional latent Gaussian at the mode."""

    hyper_hat: Stage1Hyper
    fixed_mean: Stage1Fixed
    fixed_sd: np.ndarray
    latent_mean: np.ndarray
    posterior: SparsePrecision
    index: LatentIndex
    log_marginal: float
    mesh: TriangularMesh
    obs: ObservationSet
    config: Stage1Config
    grid: list | None = None
    n_evaluations: int = 0

    def fixed_indices(self) -> np.ndarray:
        return np.array([self.index.alpha0, self.index.beta0, self.index.beta1])

    def sample_hyper(self, k: int, rng: np.random.Generator) -> dict:
        """k draws per hyperparameter: degenerate at the mode, or grid draws."""
        if self.grid:
            weights = np.array([g.weight for g in self.grid])
            picks = rng.choice(len(self.grid), size=k, p=weights)
            mat = np.array([self.grid[i].hyper.as_array() for i in picks])
        else:
            mat = np.tile(self.hyper_hat.as_array(), (k, 1))
        return {name: mat[:, j] for j, name in enumerate(HYPER_NAMES)}

    def sample_fixed(self, k: int, rng: np.random.Generator) -> dict:
        """k draws per fixed effect from its Gaussian posterior marginal."""
        means = np.array(
            [self.fixed_mean.alpha0, self.fixed_mean.beta0, self.fixed_mean.beta1]
        )
        draws = means + self.fixed_sd * rng.standard_normal((k, 3))
        return {name: draws[:, j] for j, name in enumerate(FIXED_NAMES)}


def _default_init(obs: ObservationSet, mesh: TriangularMesh) -> Stage1Hyper:
    w_sd = float(np.std(obs.w)) or 1.0
    xt_sd = float(np.std(obs.x_tilde)) or 1.0
    xmin, ymin, xmax, ymax = mesh.bounds()
    extent = max(xmax - xmin, ymax - ymin)
    return Stage1Hyper(
        alpha1=float(np.clip(xt_sd / w_sd, 0.1, 10.0)),
        sigma2_e=max(0.1 * w_sd**2, 1e-4),
        sigma2_delta=max(0.2 * xt_sd**2, 1e-4),
        varsigma=0.5,
        sigma2_omega=max(0.5 * w_sd**2, 1e-4),
        rho=0.25 * extent,
    )


_TRANSFORM_BOUNDS = [
    (-50.0, 50.0),  # alpha1
    (-14.0, 8.0),  # log sigma2_e
    (-14.0, 8.0),  # log sigma2_delta
    (-8.0, 8.0),  # AR transform
    (-14.0, 8.0),  # log sigma2_omega
    (-14.0, 8.0),  # log rho (further clipped to the mesh extent below)
]


def fit(
    obs: ObservationSet,
    mesh: TriangularMesh,
    projector: Projector,
    config: Stage1Config | None = None,
) -> Stage1Fit:
    """Empirical-Bayes fit of the fusion model.

    Maximizes the marginal posterior of the hyperparameters in transformed
    coordinates (log variances, log range, log((1+vs)/(1-vs))), then assembles
    the conditional latent Gaussian at the mode.  With ``hyper_mode='grid'``
    a 3-point-per-axis grid around the mode is evaluated and reweighted by the
    marginal for downstream integration.
    """
    config = config or Stage1Config()
    builder = _SystemBuilder(
        obs, mesh, projector, config.fixed_precisions, config.fixed_prior_variance
    )

    def objective(tvec):
        try:
            hyper = Stage1Hyper.from_transformed(tvec)
        except (ValueError, OverflowError):
            return -np.inf
        lp = config.priors.log_density(hyper)
        if not np.isfinite(lp):
            return -np.inf
        return lp + builder.log_marginal_likelihood(hyper)

    init = config.init or _default_init(obs, mesh)
    x0 = init.to_transformed()
    xmin, ymin, xmax, ymax = mesh.bounds()
    extent = max(xmax - xmin, ymax - ymin)
    bounds = list(_TRANSFORM_BOUNDS)
    bounds[5] = (math.log(extent) - 6.0, math.log(extent) + 2.0)
    x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])

    try:
        t_hat, f_hat, evals = maximize(
            objective,
            x0,
            step=0.5,
            coord_budget=config.coord_budget,
            tol=config.tol,
            nm_maxiter=config.nm_maxiter,
            bounds=bounds,
        )
    except OptimizationError as exc:
        best = Stage1Hyper.from_transformed(exc.best_x) if exc.best_x is not None else None
        raise Stage1Error(str(exc), best_hyper=best, grad_norm=exc.grad_norm) from exc

    hyper_hat = Stage1Hyper.from_transformed(t_hat)
    q_post, _, mean, _, _ = builder.posterior_pieces(hyper_hat)
    idx = builder.idx
    fixed_idx = np.array([idx.alpha0, idx.beta0, idx.beta1])
    fixed_sd = np.sqrt(q_post.marginal_variances(fixed_idx))
    fixed_mean = Stage1Fixed(
        alpha0=float(mean[idx.alpha0]),
        beta0=float(mean[idx.beta0]),
        beta1=float(mean[idx.beta1]),
    )

    grid = None
    if config.hyper_mode == "grid":
        points = [(t_hat, f_hat)]
        for axis in range(len(t_hat)):
            for sign in (-1.0, 1.0):
                t = t_hat.copy()
                t[axis] += sign * config.grid_step
                points.append((t, objective(t)))
        logs = np.array([p[1] for p in points])
        keep = np.isfinite(logs)
        weights = np.exp(logs[keep] - logs[keep].max())
        weights /= weights.sum()
        grid = []
        for (t, _), wgt in zip([p for p, k in zip(points, keep) if k], weights):
            h = Stage1Hyper.from_transformed(t)
            qg, _, mg, _, _ = builder.posterior_pieces(h)
            grid.append(GridPoint(hyper=h, weight=float(wgt), posterior=qg, mean=mg))

    return Stage1Fit(
        hyper_hat=hyper_hat,
        fixed_mean=fixed_mean,
        fixed_sd=fixed_sd,
        latent_mean=mean,
        posterior=q_post,
        index=idx,
        log_marginal=f_hat,
        mesh=mesh,
        obs=obs,
        config=config,
        grid=grid,
        n_evaluations=evals,
    )


def predict_latent(
    fit_result: Stage1Fit,
    grid_points,
    z_grid,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Posterior-predictive draws of the exposure surface on ``grid_points``.

    Returns an array of shape (n_samples, n_points, T): each draw takes the
    latent field and the fixed effects jointly from the conditional Gaussian
    (at the mode, or at a weighted grid point when the fit carries one) and
    composes x(s, t) = beta0 + beta1 z(s, t) + [B xi_t](s).
    """
    pts = as_points(grid_points)
    z_grid = np.atleast_2d(np.asarray(z_grid, dtype=float))
    idx = fit_result.index
    T, D = idx.n_times, idx.n_nodes
    if z_grid.shape != (len(pts), T):
        raise ValueError(f"z_grid must have shape {(len(pts), T)}, got {z_grid.shape}")
    b_grid = build_projector(fit_result.mesh, pts).matrix

    if fit_result.grid:
        weights = np.array([g.weight for g in fit_result.grid])
        picks = rng.choice(len(fit_result.grid), size=n_samples, p=weights)
        latents = np.empty((idx.size, n_samples))
        for j, g_idx in enumerate(picks):
            point = fit_result.grid[g_idx]
            latents[:, j] = point.mean + point.posterior.sample(rng)
    else:
        draws = fit_result.posterior.sample(rng, n=n_samples)
        draws = draws[:, None] if n_samples == 1 else draws
        latents = fit_result.latent_mean[:, None] + draws

    out = np.empty((n_samples, len(pts), T))
    xi = latents[idx.xi].reshape(T, D, n_samples)
    beta0 = latents[idx.beta0]
    beta1 = latents[idx.beta1]
    for t in range(T):
        interp = b_grid @ xi[t]  # (P, J)
        out[:, :, t] = (beta0[:, None] + np.outer(beta1, z_grid[:, t]) + interp.T)
    return out


def write_fit_summary_csv(fit_result: Stage1Fit, path) -> None:
    """Fit summary as CSV with columns (parameter, estimate, sd, q025, q975).

    Hyperparameters are degenerate at the mode unless the fit carries a grid,
    in which case spread comes from the weighted grid points.
    """
    rows = []
    hyper_mat = None
    weights = None
    if fit_result.grid:
        hyper_mat = np.array([g.hyper.as_array() for g in fit_result.grid])
        weights = np.array([g.weight for g in fit_result.grid])
    for j, name in enumerate(HYPER_NAMES):
        mode_val = getattr(fit_result.hyper_hat, name)
        if hyper_mat is not None:
            mean = float(weights @ hyper_mat[:, j])
            sd = float(math.sqrt(max(0.0, weights @ (hyper_mat[:, j] - mean) ** 2)))
        else:
            mean, sd = mode_val, 0.0
        rows.append((name, mean, sd, mean - 1.96 * sd, mean + 1.96 * sd))
    fm = fit_result.fixed_mean
    for name, m, s in zip(
        FIXED_NAMES, (fm.alpha0, fm.beta0, fm.beta1), fit_result.fixed_sd
    ):
        rows.append((name, m, s, m - 1.96 * s, m + 1.96 * s))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "estimate", "sd", "q025", "q975"])
        for name, est, sd, lo, hi in rows:
            writer.writerow([name, f"{est:.12g}", f"{sd:.12g}", f"{lo:.12g}", f"{hi:.12g}"])


def write_latent_samples_csv(samples: np.ndarray, path) -> None:
    """Latent draws as a long CSV with columns (sample, t, grid_index, value)."""
    J, P, T = samples.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "t", "grid_index", "value"])
        for j in range(J):
            for t in range(T):
                for p in range(P):
                    writer.writerow([j, t, p, f"{samples[j, p, t]:.12g}"])
