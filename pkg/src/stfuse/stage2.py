"""Second-stage health model and first-stage uncertainty propagation.

Counts per block and time are Poisson with a log-linear relative risk driven
by the block exposure, an iid block effect and a first-order random-walk time
effect.  The random walk is intrinsic, so identifiability is fixed by a hard
sum-to-zero constraint implemented through an orthonormal basis of the
constrained subspace; the intercept stays in the model and absorbs the gauge.

Inference is a nested Laplace scheme: inner Newton iterations find the joint
latent mode given the two variance hyperparameters, the outer optimizer
maximizes the Laplace-approximate marginal posterior over the log variances.
Stage-1 uncertainty enters through :func:`propagate`, which refits the model
for each posterior-predictive exposure sample and pools all draws.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import null_space

from . import priors as priormod
from ._optim import OptimizationError, maximize
from .blockagg import GridSpec, centroid_members, compute_overlaps, method1, method2
from .stage1 import Stage1Fit, predict_latent

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

PARAM_NAMES = ("gamma0", "gamma1", "sigma2_phi", "sigma2_nu")


class Stage2Error(RuntimeError):
    """Inner Newton divergence; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class HealthData:
    """Counts, expected counts and block exposures, each of shape (N, T)."""

    Y: np.ndarray
    P: np.ndarray
    xhatB: np.ndarray

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.Y))
        p = np.atleast_2d(np.asarray(self.P, dtype=float))
        x = np.atleast_2d(np.asarray(self.xhatB, dtype=float))
        if y.shape != p.shape or y.shape != x.shape:
            raise ValueError("Y, P and xhatB must share one (N, T) shape")
        if np.any(y < 0) or not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("Y must hold non-negative integers")
        if np.any(p <= 0):
            raise ValueError("P must be strictly positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("xhatB must be finite")
        object.__setattr__(self, "Y", y.astype(float))
        object.__setattr__(self, "P", p)
        object.__setattr__(self, "xhatB", x)

    @property
    def shape(self):
        return self.Y.shape


@dataclass(frozen=True)
class Stage2Hyper:
    sigma2_phi: float
    sigma2_nu: float

    def __post_init__(self):
        if self.sigma2_phi <= 0 or self.sigma2_nu <= 0:
            raise ValueError("variance parameters must be positive")


class Stage2Priors:
    """Hyperpriors: Gamma(1, 0.00005) precisions, or PC tail conditions."""

    def __init__(self, kind, sigma_phi0=None, sigma_nu0=None, alpha=0.05):
        if kind not in ("flat", "non_informative", "pc"):
            raise ValueError(f"unknown prior kind {kind!r}")
        if kind == "pc" and (sigma_phi0 is None or sigma_nu0 is None):
            raise ValueError("pc priors need sigma_phi0 and sigma_nu0")
        self.kind = kind
        self.sigma_phi0 = sigma_phi0
        self.sigma_nu0 = sigma_nu0
        self.alpha = alpha

    @classmethod
    def flat(cls):
        return cls("flat")

    @classmethod
    def non_informative(cls):
        return cls("non_informative")

    @classmethod
    def pc(cls, sigma_phi0, sigma_nu0, alpha=0.05):
        return cls("pc", sigma_phi0=sigma_phi0, sigma_nu0=sigma_nu0, alpha=alpha)

    def log_density(self, h: Stage2Hyper) -> float:
        if self.kind == "flat":
            return 0.0
        if self.kind == "non_informative":
            return priormod.gamma_precision_logpdf(
                h.sigma2_phi, 1.0, 5e-5
            ) + priormod.gamma_precision_logpdf(h.sigma2_nu, 1.0, 5e-5)
        return priormod.pc_sd_logpdf(
            h.sigma2_phi, self.sigma_phi0, self.alpha
        ) + priormod.pc_sd_logpdf(h.sigma2_nu, self.sigma_nu0, self.alpha)


@dataclass
class Stage2Config:
    priors: Stage2Priors = field(default_factory=Stage2Priors.non_informative)
    gamma1_prior_variance: float = 1000.0
    include_block_effect: bool = True
    include_time_effect: bool = True
    likelihood: str = "poisson"  # "gaussian" substitutes the test hook
    gaussian_variance: float = 1.0
    hyper_mode: str = "mode"  # or "grid": 3x3 around the mode
    grid_step: float = 0.8
    newton_max_iter: int = 100
    coord_budget: int = 60
    nm_maxiter: int = 200
    tol: float = 1e-4
    init: Stage2Hyper | None = None

    def __post_init__(self):
        if self.likelihood not in ("poisson", "gaussian"):
            raise ValueError("likelihood must be 'poisson' or 'gaussian'")
        if self.hyper_mode not in ("mode", "grid"):
            raise ValueError("hyper_mode must be 'mode' or 'grid'")


class _Model:
    """Design, priors and Newton machinery for one data set."""

    def __init__(self, data: HealthData, config: Stage2Config):
        self.data = data
        self.config = config
        n, t = data.shape
        self.n_blocks, self.n_times = n, t
        self.y = data.Y.T.ravel()  # time-major rows (t, i)
        self.p = data.P.T.ravel()
        x = data.xhatB.T.ravel()

        cols = [np.ones(n * t), x]
        self.slice_phi = None
        self.slice_v = None
        k = 2
        if config.include_block_effect:
            block_of = np.tile(np.arange(n), t)
            z_phi = np.zeros((n * t, n))
            z_phi[np.arange(n * t), block_of] = 1.0
            cols.append(z_phi)
            self.slice_phi = slice(k, k + n)
            k += n
        self.f_basis = None
        if config.include_time_effect and t > 1:
            time_of = np.repeat(np.arange(t), n)
            z_t = np.zeros((n * t, t))
            z_t[np.arange(n * t), time_of] = 1.0
            self.f_basis = null_space(np.ones((1, t)))  # (t, t-1), orthonormal
            cols.append(z_t @ self.f_basis)
            self.slice_v = slice(k, k + t - 1)
            k += t - 1
        self.x = np.column_stack([c if c.ndim == 2 else c[:, None] for c in cols])
        self.dim = k

        # random-walk structure matrix and its constrained log-determinant
        if self.f_basis is not None:
            d = np.diff(np.eye(t), axis=0)
            r = d.T @ d
            self.rw_reduced = self.f_basis.T @ r @ self.f_basis
            sign, logdet = np.linalg.slogdet(self.rw_reduced)
            self.rw_logdet = float(logdet)
        self.degenerate_columns = [
            int(t_) for t_ in range(t) if data.Y[:, t_].sum() == 0
        ]
        if self.degenerate_columns:
            logger.warning(
                "all-zero count columns at t=%s", self.degenerate_columns
            )

    def prior_precision(self, hyper: Stage2Hyper) -> np.ndarray:
        q = np.zeros((self.dim, self.dim))
        q[1, 1] = 1.0 / self.config.gamma1_prior_variance
        if self.slice_phi is not None:
            idx = np.arange(self.slice_phi.start, self.slice_phi.stop)
            q[idx, idx] = 1.0 / hyper.sigma2_phi
        if self.slice_v is not None:
            q[self.slice_v, self.slice_v] = self.rw_reduced / hyper.sigma2_nu
        return q

    def log_prior_latent(self, u, hyper: Stage2Hyper) -> float:
        val = priormod.normal_logpdf(u[1], 0.0, self.config.gamma1_prior_variance)
        if self.slice_phi is not None:
            phi = u[self.slice_phi]
            n = len(phi)
            val += -0.5 * n * (LOG_2PI + math.log(hyper.sigma2_phi)) - 0.5 * float(
                phi @ phi
            ) / hyper.sigma2_phi
        if self.slice_v is not None:
            v = u[self.slice_v]
            k = len(v)
            q_v = self.rw_reduced / hyper.sigma2_nu
            val += 0.5 * (self.rw_logdet - k * math.log(hyper.sigma2_nu)) - 0.5 * float(
                v @ q_v @ v
            ) - 0.5 * k * LOG_2PI
        return val

    def log_likelihood(self, eta) -> float:
        if self.config.likelihood == "poisson":
            from scipy.special import gammaln

            mu = self.p * np.exp(eta)
            return float(
                np.sum(self.y * (np.log(self.p) + eta) - mu - gammaln(self.y + 1.0))
            )
        s2 = self.config.gaussian_variance
        r = self.y - eta
        return float(-0.5 * np.sum(r * r) / s2 - 0.5 * len(r) * (LOG_2PI + math.log(s2)))

    def _lik_terms(self, eta):
        """(gradient weight vector, Hessian weight vector) of the likelihood."""
        if self.config.likelihood == "poisson":
            mu = self.p * np.exp(eta)
            return self.y - mu, mu
        s2 = self.config.gaussian_variance
        return (self.y - eta) / s2, np.full(len(eta), 1.0 / s2)

    def newton_mode(self, hyper: Stage2Hyper, u0=None, tol=1e-9):
        """Penalized-likelihood mode and curvature by damped Newton."""
        q = self.prior_precision(hyper)
        u = np.zeros(self.dim) if u0 is None else u0.copy()
        if u0 is None:
            u[0] = math.log(max(self.y.sum(), 0.5) / self.p.sum())
        scale = 1.0 + float(np.abs(self.y).sum())
        trace = []

        def objective(u_):
            return self.log_likelihood(self.x @ u_) - 0.5 * float(u_ @ q @ u_)

        obj = objective(u)
        for _ in range(self.config.newton_max_iter):
            eta = self.x @ u
            g_lik, w = self._lik_terms(eta)
            grad = self.x.T @ g_lik - q @ u
            trace.append(float(np.abs(grad).max()))
            if trace[-1] <= tol * scale:
                h = self.x.T @ (w[:, None] * self.x) + q
                return u, h, trace
            h = self.x.T @ (w[:, None] * self.x) + q
            try:
                delta = np.linalg.solve(h, grad)
            except np.linalg.LinAlgError as exc:
                raise Stage2Error(f"singular Newton system: {exc}", trace) from exc
            step = 1.0
            for _ in range(30):
                cand = u + step * delta
                cand_obj = objective(cand)
                if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12:
                    u, obj = cand, cand_obj
                    break
                step *= 0.5
            else:
                raise Stage2Error("Newton line search failed to improve", trace)
        raise Stage2Error(
            f"Newton did not converge in {self.config.newton_max_iter} iterations",
            trace,
        )

    def laplace_log_marginal(self, hyper: Stage2Hyper, u0=None):
        u, h, trace = self.newton_mode(hyper, u0=u0)
        sign, logdet = np.linalg.slogdet(h)
        if sign <= 0:
            raise Stage2Error("Laplace curvature not positive definite", trace)
        value = (
            self.log_likelihood(self.x @ u)
            + self.log_prior_latent(u, hyper)
            - 0.5 * logdet
            + 0.5 * self.dim * LOG_2PI
        )
        return value, u, h


@dataclass
class Stage2GridPoint:
    hyper: Stage2Hyper
    weight: float
    mode: np.ndarray
    chol_upper: np.ndarray  # upper Cholesky factor of the curvature


@dataclass
class Stage2Fit:
    """Latent mode, Laplace curvature and hyperparameter estimates."""

    gamma0: float
    gamma1: float
    phi: np.ndarray
    nu: np.ndarray
    mode: np.ndarray
    curvature: sp.csc_matrix
    hyper_hat: Stage2Hyper
    log_marginal: float
    model: _Model
    degenerate_columns: list
    grid: list | None = None

    def latent_sd(self) -> np.ndarray:
        cov = np.linalg.inv(self.curvature.toarray())
        return np.sqrt(np.diag(cov))


def _hyper_dims(config: Stage2Config):
    dims = []
    if config.include_block_effect:
        dims.append("sigma2_phi")
    if config.include_time_effect:
        dims.append("sigma2_nu")
    return dims


def fit_glmm(data: HealthData, config: Stage2Config | None = None, warm_start=None) -> Stage2Fit:
    """Fit the health model by nested Laplace approximation.

    The outer optimization runs on (log sigma2_phi, log sigma2_nu) for the
    effects present in the model; with no random effects only the inner Newton
    step runs.  ``warm_start`` carries a latent mode between repeated fits on
    similar data (used heavily by :func:`propagate`).
    """
    config = config or Stage2Config()
    model = _Model(data, config)
    dims = _hyper_dims(config)
    state = {"u": warm_start}

    def to_hyper(tvec):
        vals = dict(sigma2_phi=1.0, sigma2_nu=1.0)
        for name, t in zip(dims, tvec):
            vals[name] = math.exp(t)
        return Stage2Hyper(**vals)

    def objective(tvec):
        hyper = to_hyper(tvec)
        lp = config.priors.log_density(hyper)
        if not np.isfinite(lp):
            return -np.inf
        try:
            value, u, _ = model.laplace_log_marginal(hyper, u0=state["u"])
        except Stage2Error:
            return -np.inf
        state["u"] = u
        return lp + value

    if dims:
        init = config.init or Stage2Hyper(0.05, 0.05)
        x0 = np.array([math.log(getattr(init, name)) for name in dims])
        bounds = [(-16.0, 6.0)] * len(dims)
        try:
            t_hat, _, _ = maximize(
                objective,
                x0,
                step=0.8,
                coord_budget=config.coord_budget,
                tol=config.tol,
                nm_maxiter=config.nm_maxiter,
                bounds=bounds,
            )
        except OptimizationError as exc:
            raise Stage2Error(f"hyperparameter search failed: {exc}") from exc
        hyper_hat = to_hyper(t_hat)
    else:
        t_hat = np.empty(0)
        hyper_hat = Stage2Hyper(1.0, 1.0)

    log_marg, u_mode, h = model.laplace_log_marginal(hyper_hat, u0=state["u"])
    log_marg += config.priors.log_density(hyper_hat) if dims else 0.0

    grid = None
    if config.hyper_mode == "grid" and dims:
        offsets = [np.zeros(len(dims))]
        for axis in range(len(dims)):
            for sign in (-1.0, 1.0):
                off = np.zeros(len(dims))
                off[axis] = sign * config.grid_step
                offsets.append(off)
        if len(dims) == 2:  # full 3x3: add the diagonal corners
            for sx in (-1.0, 1.0):
                for sy in (-1.0, 1.0):
                    offsets.append(np.array([sx, sy]) * config.grid_step)
        points = []
        for off in offsets:
            t_pt = t_hat + off
            val = objective(t_pt)
            if np.isfinite(val):
                hy = to_hyper(t_pt)
                _, u_pt, h_pt = model.laplace_log_marginal(hy, u0=state["u"])
                points.append((hy, val, u_pt, np.linalg.cholesky(h_pt).T))
        logs = np.array([p[1] for p in points])
        weights = np.exp(logs - logs.max())
        weights /= weights.sum()
        grid = [
            Stage2GridPoint(hyper=p[0], weight=float(w), mode=p[2], chol_upper=p[3])
            for p, w in zip(points, weights)
        ]

    nu = model.f_basis @ u_mode[model.slice_v] if model.slice_v is not None else np.zeros(model.n_times)
    phi = u_mode[model.slice_phi] if model.slice_phi is not None else np.zeros(model.n_blocks)
    return Stage2Fit(
        gamma0=float(u_mode[0]),
        gamma1=float(u_mode[1]),
        phi=np.asarray(phi),
        nu=np.asarray(nu),
        mode=u_mode,
        curvature=sp.csc_matrix(h),
        hyper_hat=hyper_hat,
        log_marginal=float(log_marg),
        model=model,
        degenerate_columns=model.degenerate_columns,
        grid=grid,
    )


def sample_stage2(fit: Stage2Fit, k: int, rng: np.random.Generator) -> dict:
    """k posterior draws per health-model parameter.

    Latent entries come from the Gaussian Laplace approximation at the mode
    (or at weighted grid points when the fit carries a grid); the variance
    hyperparameters are degenerate at the mode unless a grid is present.
    """
    dim = fit.model.dim
    out_g0 = np.empty(k)
    out_g1 = np.empty(k)
    out_s2p = np.empty(k)
    out_s2n = np.empty(k)
    if fit.grid:
        weights = np.array([g.weight for g in fit.grid])
        picks = rng.choice(len(fit.grid), size=k, p=weights)
        for j in range(k):
            point = fit.grid[picks[j]]
            z = rng.standard_normal(dim)
            u = point.mode + np.linalg.solve(point.chol_upper, z)
            out_g0[j], out_g1[j] = u[0], u[1]
            out_s2p[j] = point.hyper.sigma2_phi
            out_s2n[j] = point.hyper.sigma2_nu
    else:
        upper = np.linalg.cholesky(fit.curvature.toarray()).T
        z = rng.standard_normal((dim, k))
        u = fit.mode[:, None] + np.linalg.solve(upper, z)
        out_g0, out_g1 = u[0], u[1]
        out_s2p.fill(fit.hyper_hat.sigma2_phi)
        out_s2n.fill(fit.hyper_hat.sigma2_nu)
    return {
        "gamma0": out_g0,
        "gamma1": out_g1,
        "sigma2_phi": out_s2p,
        "sigma2_nu": out_s2n,
    }


@dataclass
class PooledPosterior:
    """Pooled draws over the J exposure samples and K per-fit draws."""

    samples: dict
    n_inner: int
    n_failures: int
    block_exposure_samples: np.ndarray | None = None

    def summary(self) -> list:
        rows = []
        for name in PARAM_NAMES:
            s = self.samples[name]
            rows.append(
                (
                    name,
                    float(np.mean(s)),
                    float(np.median(s)),
                    float(np.percentile(s, 2.5)),
                    float(np.percentile(s, 97.5)),
                    len(s),
                    self.n_failures,
                )
            )
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["parameter", "mean", "median", "q025", "q975", "n_samples", "n_failures"]
            )
            for row in self.summary():
                name, mean, median, lo, hi, n, fails = row
                writer.writerow(
                    [name, f"{mean:.12g}", f"{median:.12g}", f"{lo:.12g}", f"{hi:.12g}", n, fails]
                )


def propagate(
    stage1_fit: Stage1Fit,
    blocks,
    grid: GridSpec,
    health_inputs: HealthData,
    n_exposure_samples: int,
    n_draws_per_fit: int,
    method: int,
    rng: np.random.Generator,
    stage2_config: Stage2Config | None = None,
    overlap_table=None,
    members=None,
) -> PooledPosterior:
    """Propagate first-stage uncertainty into the health model posterior.

    For each of J posterior-predictive exposure fields: aggregate to blocks by
    the requested method, refit the health model, draw K samples per
    parameter; pool all J*K draws.  Inner failures are recorded, not fatal.
    """
    if method not in (1, 2):
        raise ValueError("method must be 1 or 2")
    if n_exposure_samples < 1 or n_draws_per_fit < 1:
        raise ValueError("J and K must be >= 1")
    stage2_config = stage2_config or Stage2Config()
    obs = stage1_fit.obs
    centroids = obs.proxy_centroids
    z_grid = obs.z[obs.n_monitors :]
    fields = predict_latent(stage1_fit, centroids, z_grid, n_exposure_samples, rng)

    if method == 1 and overlap_table is None:
        overlap_table = compute_overlaps(blocks, grid)
    if method == 2 and members is None:
        members = centroid_members(blocks, grid)

    n, t = health_inputs.shape
    pooled = {name: [] for name in PARAM_NAMES}
    block_samples = np.empty((n_exposure_samples, n, t))
    n_failures = 0
    warm = None
    for j in range(n_exposure_samples):
        xb = np.empty((n, t))
        for tt in range(t):
            vals = fields[j, :, tt]
            if method == 1:
                xb[:, tt] = method1(vals, overlap_table)
            else:
                xb[:, tt] = method2(vals, blocks, grid, members=members)
        block_samples[j] = xb
        try:
            data_j = HealthData(Y=health_inputs.Y, P=health_inputs.P, xhatB=xb)
            fit_j = fit_glmm(data_j, stage2_config, warm_start=warm)
            warm = fit_j.mode
            draws = sample_stage2(fit_j, n_draws_per_fit, rng)
        except Stage2Error as exc:
            logger.warning("inner stage-2 fit %d failed: %s", j, exc)
            n_failures += 1
            continue
        for name in PARAM_NAMES:
            pooled[name].append(draws[name])
    if not pooled["gamma1"]:
        raise Stage2Error("every inner stage-2 fit failed")
    samples = {name: np.concatenate(chunks) for name, chunks in pooled.items()}
    return PooledPosterior(
        samples=samples,
        n_inner=n_exposure_samples,
        n_failures=n_failures,
        block_exposure_samples=block_samples,
    )
