"""Synthetic-data generators, scenario presets and the replication harness.

One replicate draws an exposure surface on a regular grid (exact dense Matern
innovations evolving as an AR(1)), observes it through a monitor network and a
biased noisy proxy grid, aggregates the truth to irregular blocks, simulates
Poisson health counts, then runs the full two-stage inference chain and
records posterior samples.  Replicates are independent, seeded by index, and
aggregate into bias / RMSE / coverage metrics per parameter and per block.

The bundled study region is a 98-block Voronoi partition of a square whose
side makes the true range parameter 46% of the domain extent; the scale is
configurable because the original map's coordinate units are not knowable.
"""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.spatial import Voronoi, cKDTree

from .blockagg import GridSpec, OverlapTable, centroid_members, compute_overlaps, method1
from .gmrf import MaternParams, matern_cov
from .mesh import BlockGeometry, Projector, build_mesh, build_projector, read_blocks_geojson
from .stage1 import (
    FIXED_NAMES,
    HYPER_NAMES,
    ObservationSet,
    Stage1Config,
    Stage1Hyper,
    Stage1Priors,
)
from .stage1 import fit as stage1_fit
from .stage2 import (
    PARAM_NAMES as STAGE2_PARAM_NAMES,
    HealthData,
    Stage2Config,
    Stage2Error,
    Stage2Hyper,
    Stage2Priors,
    propagate,
)

logger = logging.getLogger(__name__)

STAGE1_PARAM_NAMES = (
    "beta0",
    "beta1",
    "alpha0",
    "alpha1",
    "sigma2_delta",
    "sigma2_e",
    "sigma2_omega",
    "rho",
    "varsigma",
)

SCENARIO_TABLE = {
    # label: (T, sparse, informative)
    "A": (3, False, True),
    "B": (3, False, False),
    "C": (3, True, True),
    "D": (3, True, False),
    "E": (6, False, True),
    "F": (6, False, False),
    "G": (6, True, True),
    "H": (6, True, False),
    "I": (12, False, True),
    "J": (12, False, False),
    "K": (12, True, True),
    "L": (12, True, False),
}


class ScenarioError(RuntimeError):
    """Scenario-level failure (bad label, failure budget exceeded)."""


@dataclass(frozen=True)
class TrueParams:
    """Generating parameter values of the simulation design."""

    beta0: float = 0.0
    beta1: float = 2.0
    sigma2_omega: float = 1.5
    rho: float = 1.89
    varsigma: float = 0.7
    sigma2_e: float = 0.1
    alpha0: float = -1.0
    alpha1: float = 1.5
    sigma2_delta: float = 1.0
    gamma0: float = -3.0
    # "an expected increase of 20% in the relative risk per unit exposure"
    gamma1: float = math.log(1.2)
    sigma2_phi: float = 0.02
    sigma2_nu: float = 0.02

    def stage1_hyper(self) -> Stage1Hyper:
        return Stage1Hyper(
            alpha1=self.alpha1,
            sigma2_e=self.sigma2_e,
            sigma2_delta=self.sigma2_delta,
            varsigma=self.varsigma,
            sigma2_omega=self.sigma2_omega,
            rho=self.rho,
        )

    def as_dict(self) -> dict:
        return {
            "beta0": self.beta0,
            "beta1": self.beta1,
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "sigma2_delta": self.sigma2_delta,
            "sigma2_e": self.sigma2_e,
            "sigma2_omega": self.sigma2_omega,
            "rho": self.rho,
            "varsigma": self.varsigma,
            "gamma0": self.gamma0,
            "gamma1": self.gamma1,
            "sigma2_phi": self.sigma2_phi,
            "sigma2_nu": self.sigma2_nu,
        }


@dataclass
class ScenarioConfig:
    """One cell of the scenario design plus every knob of the harness."""

    label: str = "A"
    T: int = 3
    sparse: bool = False
    informative: bool = True
    n_sim: int = 50
    J: int = 20
    K: int = 100
    grid_nx: int = 30
    grid_ny: int = 30
    side: float = 4.11  # domain scale: rho = 1.89 is 46% of this extent
    mesh_edge_factor: float = 0.25
    mesh_buffer: float | None = None
    monitor_fraction: float = 0.02
    sparse_monitor_count: int = 20
    master_seed: int = 20240817
    method: str = "both"  # "1", "2" or "both"
    gamma1_literal: bool = False  # read "log(gamma1)=1.2" literally
    failure_budget: float = 0.1
    stage1_hyper_mode: str = "mode"
    stage2_hyper_mode: str = "mode"
    stage1_coord_budget: int = 150
    stage1_nm_maxiter: int = 250
    blocks_path: str | None = None  # None: bundled 98-block map
    true_params: TrueParams = field(default_factory=TrueParams)

    def __post_init__(self):
        if self.method not in ("1", "2", "both"):
            raise ScenarioError("method must be '1', '2' or 'both'")
        if self.gamma1_literal and self.true_params.gamma1 == math.log(1.2):
            self.true_params = replace(self.true_params, gamma1=math.exp(1.2))

    @property
    def methods(self):
        return (1, 2) if self.method == "both" else (int(self.method),)

    @staticmethod
    def preset(label: str, desk_scale: bool = True, **overrides) -> "ScenarioConfig":
        """Scenario A-L from the design table, at desk or full scale."""
        label = label.upper()
        if label not in SCENARIO_TABLE:
            raise ScenarioError(
                f"unknown scenario {label!r}; valid labels: {' '.join(SCENARIO_TABLE)}"
            )
        t, sparse, informative = SCENARIO_TABLE[label]
        kwargs = dict(label=label, T=t, sparse=sparse, informative=informative)
        if not desk_scale:
            kwargs.update(grid_nx=100, grid_ny=100, n_sim=500, J=50, K=200)
        kwargs.update(overrides)
        return ScenarioConfig(**kwargs)

    def grid(self) -> GridSpec:
        return GridSpec(
            x0=0.0,
            y0=0.0,
            dx=self.side / self.grid_nx,
            dy=self.side / self.grid_ny,
            nx=self.grid_nx,
            ny=self.grid_ny,
        )


def _polygon_centroid(ring: np.ndarray) -> np.ndarray:
    x, y = ring[:, 0], ring[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    cx = np.sum((x + xn) * cross) / (6.0 * a)
    cy = np.sum((y + yn) * cross) / (6.0 * a)
    return np.array([cx, cy])


def _voronoi_cells(points: np.ndarray, side: float) -> list:
    """Voronoi cells of ``points`` clipped exactly to [0, side]^2.

    Mirroring the seeds across all four box edges turns the boundary cells
    finite with edges exactly on the box, so the cells tile the square.
    """
    mirrored = [points]
    for axis, bound in ((0, 0.0), (0, side), (1, 0.0), (1, side)):
        m = points.copy()
        m[:, axis] = 2.0 * bound - m[:, axis]
        mirrored.append(m)
    vor = Voronoi(np.vstack(mirrored))
    cells = []
    for i in range(len(points)):
        region = vor.regions[vor.point_region[i]]
        verts = vor.vertices[region]
        order = np.argsort(np.arctan2(*(verts - verts.mean(axis=0)).T[::-1]))
        verts = verts[order]
        verts = np.clip(verts, 0.0, side)
        cells.append(verts)
    return cells


def make_block_map(n_blocks: int = 98, side: float = 4.11, seed: int = 7, lloyd_iters: int = 3):
    """Irregular block partition of the square: relaxed Voronoi cells."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.03 * side, 0.97 * side, size=(n_blocks, 2))
    cells = _voronoi_cells(pts, side)
    for _ in range(lloyd_iters):
        pts = np.array([_polygon_centroid(c) for c in cells])
        cells = _voronoi_cells(pts, side)
    return [
        BlockGeometry(id=f"B{i:03d}", rings=(cells[i],)) for i in range(n_blocks)
    ]


def default_blocks():
    """The bundled 98-block study map."""
    path = resources.files("stfuse.data") / "blocks98.geojson"
    with resources.as_file(path) as p:
        return read_blocks_geojson(p)


@dataclass
class FieldSim:
    """One draw of the generating model on the grid."""

    x: np.ndarray  # (G, T) exposure surface values at cell centroids
    z: np.ndarray  # (G, T) covariate
    xi: np.ndarray  # (G, T) latent space-time residual
    block_truth: np.ndarray | None  # (N, T) simple means over interior centroids


_FIELD_CHOL_CACHE: dict = {}


def _matern_chol(grid: GridSpec, sigma2_omega: float, rho: float) -> np.ndarray:
    key = (grid, sigma2_omega, rho)
    if key not in _FIELD_CHOL_CACHE:
        cents = grid.centroids()
        d = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=2)
        cov = matern_cov(d, MaternParams(sigma2_omega=sigma2_omega, rho=rho))
        cov[np.diag_indices_from(cov)] = sigma2_omega * (1.0 + 1e-10)
        _FIELD_CHOL_CACHE.clear()  # one entry: scenarios reuse a single grid
        _FIELD_CHOL_CACHE[key] = np.linalg.cholesky(cov)
    return _FIELD_CHOL_CACHE[key]


def simulate_field(
    params: TrueParams,
    grid: GridSpec,
    T: int,
    rng: np.random.Generator,
    members=None,
) -> FieldSim:
    """Exposure surface x = beta0 + beta1 z + xi with AR(1)-Matern residual.

    The innovation field uses the exact dense Matern covariance between cell
    centroids (Cholesky cached per grid and parameter value), initialized at
    the stationary law xi_1 ~ N(0, Sigma / (1 - varsigma^2)).  Block truths
    are simple means over the centroids inside each block.
    """
    chol = _matern_chol(grid, params.sigma2_omega, params.rho)
    g = grid.n_cells
    xi = np.empty((g, T))
    xi[:, 0] = chol @ rng.standard_normal(g) / math.sqrt(1.0 - params.varsigma**2)
    for t in range(1, T):
        xi[:, t] = params.varsigma * xi[:, t - 1] + chol @ rng.standard_normal(g)
    z = rng.standard_normal((g, T))
    x = params.beta0 + params.beta1 * z + xi
    block_truth = None
    if members is not None:
        if any(len(m) == 0 for m in members):
            raise ScenarioError("a block contains no grid centroid at this resolution")
        block_truth = np.stack([x[m].mean(axis=0) for m in members])
    return FieldSim(x=x, z=z, xi=xi, block_truth=block_truth)


@dataclass
class MonitorSim:
    cell_indices: np.ndarray
    locations: np.ndarray
    w: np.ndarray  # (M, T)


def simulate_monitors(
    field: FieldSim,
    sparse: bool,
    params: TrueParams,
    rng: np.random.Generator,
    grid: GridSpec,
    monitor_fraction: float = 0.02,
    sparse_monitor_count: int = 20,
) -> MonitorSim:
    """Monitor readings w = x + e at a random subset of grid cells.

    The non-sparse design samples a fixed fraction of the cells; the sparse
    design places a small fixed number of stations, leaving most blocks
    without a monitor.
    """
    g = grid.n_cells
    m = sparse_monitor_count if sparse else max(1, round(monitor_fraction * g))
    cells = np.sort(rng.choice(g, size=m, replace=False))
    w = field.x[cells] + math.sqrt(params.sigma2_e) * rng.standard_normal(
        (m, field.x.shape[1])
    )
    return MonitorSim(cell_indices=cells, locations=grid.centroids()[cells], w=w)


def simulate_proxy(field: FieldSim, params: TrueParams, rng: np.random.Generator) -> np.ndarray:
    """Proxy grid: additive and multiplicative bias plus cellwise noise."""
    return (
        params.alpha0
        + params.alpha1 * field.x
        + math.sqrt(params.sigma2_delta) * rng.standard_normal(field.x.shape)
    )


def simulate_health(
    block_truth: np.ndarray,
    params: TrueParams,
    block_areas: np.ndarray,
    rng: np.random.Generator,
) -> HealthData:
    """Poisson counts with iid block effects and a sum-to-zero random walk.

    Expected counts are uniform draws scaled proportionally to block area and
    held constant over time.
    """
    n, t = block_truth.shape
    phi = math.sqrt(params.sigma2_phi) * rng.standard_normal(n)
    nu = np.cumsum(math.sqrt(params.sigma2_nu) * rng.standard_normal(t))
    nu -= nu.mean()
    areas = np.asarray(block_areas, dtype=float)
    p = (areas / areas.mean()) * rng.uniform(50.0, 150.0, size=n)
    p_mat = np.tile(p[:, None], (1, t))
    eta = params.gamma0 + params.gamma1 * block_truth + phi[:, None] + nu[None, :]
    y = rng.poisson(p_mat * np.exp(eta))
    return HealthData(Y=y, P=p_mat, xhatB=block_truth)


@dataclass
class ReplicateRecord:
    """Posterior samples and truths recorded for one replicate."""

    stage1_samples: dict  # name -> (K,)
    stage2_samples: dict  # method -> {name -> (J*K,)}
    block_estimates: dict  # method -> (J, N, T)
    block_truth: np.ndarray  # (N, T)
    n_inner_failures: int = 0


@dataclass
class ParamMetrics:
    bias: float
    rmse: float
    coverage: float


@dataclass
class MetricsReport:
    """Bias / RMSE / coverage per parameter plus per-block summaries."""

    parameters: dict  # e.g. "beta1" or "m1:gamma1" -> ParamMetrics
    block_ids: tuple
    block_bias: dict  # method -> (N,)
    block_rmse: dict  # method -> (N,)
    block_corr: dict  # method -> (N,)
    overall_block_corr: dict  # method -> float
    n_replicates: int
    n_failed_replicates: int

    def write_parameter_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "bias", "rmse", "coverage"])
            for name, m in self.parameters.items():
                writer.writerow(
                    [name, f"{m.bias:.12g}", f"{m.rmse:.12g}", f"{m.coverage:.12g}"]
                )

    def write_block_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block_id", "method", "bias", "rmse", "correlation"])
            for method in sorted(self.block_bias):
                for i, bid in enumerate(self.block_ids):
                    writer.writerow(
                        [
                            bid,
                            method,
                            f"{self.block_bias[method][i]:.12g}",
                            f"{self.block_rmse[method][i]:.12g}",
                            f"{self.block_corr[method][i]:.12g}",
                        ]
                    )

    def write_plotdata_csv(self, params_path, blocks_path, config: "ScenarioConfig") -> None:
        """Long-format records matching the result figures' axes."""
        prior_label = "informative" if config.informative else "non-informative"
        with open(params_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["scenario", "T", "sparse", "priors", "method", "parameter", "metric", "value"]
            )
            for name, m in self.parameters.items():
                method, _, base = name.rpartition(":")
                method = method or "stage1"
                for metric, value in (
                    ("bias", m.bias),
                    ("rmse", m.rmse),
                    ("coverage", m.coverage),
                ):
                    writer.writerow(
                        [
                            config.label,
                            config.T,
                            int(config.sparse),
                            prior_label,
                            method,
                            base,
                            metric,
                            f"{value:.12g}",
                        ]
                    )
        with open(blocks_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario", "method", "block_id", "metric", "value"])
            for method in sorted(self.block_bias):
                for metric, values in (
                    ("bias", self.block_bias[method]),
                    ("rmse", self.block_rmse[method]),
                    ("correlation", self.block_corr[method]),
                ):
                    for bid, value in zip(self.block_ids, values):
                        writer.writerow(
                            [config.label, method, bid, metric, f"{value:.12g}"]
                        )
                writer.writerow(
                    [
                        config.label,
                        method,
                        "ALL",
                        "correlation",
                        f"{self.overall_block_corr[method]:.12g}",
                    ]
                )


def _coverage_indicator(samples: np.ndarray, truth: float) -> float:
    lo, hi = np.percentile(samples, [2.5, 97.5])
    return 1.0 if (lo < truth < hi) else 0.0


def compute_metrics(records, truth: dict, block_ids=None) -> MetricsReport:
    """Bias, RMSE and coverage over replicates, exactly as defined.

    Per replicate i and parameter: error_i is the mean sampled deviation from
    the true value; bias averages error_i, RMSE averages the per-replicate
    root mean squared sample deviation, coverage the strict-inequality
    indicator of the 2.5-97.5 percentile interval.  Block-level estimates use
    the same formulas with the per-replicate truth and are averaged over time.
    """
    if not records:
        raise ScenarioError("no replicate records to aggregate")
    parameters = {}

    def add_param(key, truth_value, sample_lists):
        errors = []
        rmses = []
        covers = []
        for s in sample_lists:
            errors.append(float(np.mean(s)) - truth_value)
            rmses.append(math.sqrt(float(np.mean((s - truth_value) ** 2))))
            covers.append(_coverage_indicator(s, truth_value))
        parameters[key] = ParamMetrics(
            bias=float(np.mean(errors)),
            rmse=float(np.mean(rmses)),
            coverage=float(np.mean(covers)),
        )

    for name in STAGE1_PARAM_NAMES:
        if name in truth and all(name in r.stage1_samples for r in records):
            add_param(name, truth[name], [r.stage1_samples[name] for r in records])

    methods = sorted({m for r in records for m in r.stage2_samples})
    for method in methods:
        for name in STAGE2_PARAM_NAMES:
            if name in truth:
                add_param(
                    f"m{method}:{name}",
                    truth[name],
                    [r.stage2_samples[method][name] for r in records],
                )

    block_bias = {}
    block_rmse = {}
    block_corr = {}
    overall = {}
    n_blocks = records[0].block_truth.shape[0]
    for method in sorted({m for r in records for m in r.block_estimates}):
        est_means = np.stack(
            [r.block_estimates[method].mean(axis=0) for r in records]
        )  # (n_sim, N, T)
        truths = np.stack([r.block_truth for r in records])  # (n_sim, N, T)
        block_bias[method] = (est_means - truths).mean(axis=(0, 2))
        per_rep_rmse = np.stack(
            [
                np.sqrt(((r.block_estimates[method] - r.block_truth) ** 2).mean(axis=0))
                for r in records
            ]
        )  # (n_sim, N, T)
        block_rmse[method] = per_rep_rmse.mean(axis=(0, 2))
        corr = np.empty(n_blocks)
        for b in range(n_blocks):
            e = est_means[:, b, :].ravel()
            tr = truths[:, b, :].ravel()
            corr[b] = (
                np.corrcoef(e, tr)[0, 1] if np.std(e) > 0 and np.std(tr) > 0 else np.nan
            )
        block_corr[method] = corr
        overall[method] = float(np.corrcoef(est_means.ravel(), truths.ravel())[0, 1])

    ids = tuple(block_ids) if block_ids is not None else tuple(
        f"B{i:03d}" for i in range(n_blocks)
    )
    return MetricsReport(
        parameters=parameters,
        block_ids=ids,
        block_bias=block_bias,
        block_rmse=block_rmse,
        block_corr=block_corr,
        overall_block_corr=overall,
        n_replicates=len(records),
        n_failed_replicates=0,
    )


@dataclass
class _Geometry:
    """Per-scenario immutable geometry shared by every replicate."""

    grid: GridSpec
    blocks: list
    block_areas: np.ndarray
    members: list
    overlap: OverlapTable
    mesh: object
    centroid_projector: object
    centroids: np.ndarray


def build_geometry(config: ScenarioConfig) -> _Geometry:
    blocks = (
        read_blocks_geojson(config.blocks_path) if config.blocks_path else default_blocks()
    )
    grid = config.grid()
    members = centroid_members(blocks, grid)
    if any(len(m) == 0 for m in members):
        bad = [b.id for b, m in zip(blocks, members) if len(m) == 0]
        raise ScenarioError(f"grid {config.grid_nx}x{config.grid_ny} leaves blocks without centroids: {bad}")
    overlap = compute_overlaps(blocks, grid)
    hull = np.array(
        [[0.0, 0.0], [config.side, 0.0], [config.side, config.side], [0.0, config.side]]
    )
    mesh = build_mesh(
        hull,
        max_edge=config.mesh_edge_factor * config.true_params.rho,
        buffer=config.mesh_buffer,
    )
    centroids = grid.centroids()
    centroid_projector = build_projector(mesh, centroids)
    return _Geometry(
        grid=grid,
        blocks=blocks,
        block_areas=np.array([b.area for b in blocks]),
        members=members,
        overlap=overlap,
        mesh=mesh,
        centroid_projector=centroid_projector,
        centroids=centroids,
    )


def _stage1_config(config: ScenarioConfig) -> Stage1Config:
    tp = config.true_params
    if config.informative:
        priors = Stage1Priors.informative(tp.stage1_hyper())
        init = tp.stage1_hyper()
    else:
        priors = Stage1Priors.non_informative()
        init = None
    return Stage1Config(
        priors=priors,
        init=init,
        coord_budget=config.stage1_coord_budget,
        nm_maxiter=config.stage1_nm_maxiter,
        hyper_mode=config.stage1_hyper_mode,
    )


def _stage2_config(config: ScenarioConfig) -> Stage2Config:
    tp = config.true_params
    if config.informative:
        priors = Stage2Priors.pc(
            sigma_phi0=math.sqrt(tp.sigma2_phi), sigma_nu0=math.sqrt(tp.sigma2_nu)
        )
    else:
        priors = Stage2Priors.non_informative()
    return Stage2Config(
        priors=priors,
        hyper_mode=config.stage2_hyper_mode,
        init=Stage2Hyper(tp.sigma2_phi, tp.sigma2_nu) if config.informative else None,
    )


def simulate_replicate(config: ScenarioConfig, geometry: _Geometry, replicate: int):
    """Draw all synthetic data of one replicate (no inference)."""
    ss = np.random.SeedSequence(entropy=config.master_seed, spawn_key=(replicate,))
    s_field, s_mon, s_proxy, s_health, s_infer = ss.spawn(5)
    rng_field = np.random.default_rng(s_field)
    rng_mon = np.random.default_rng(s_mon)
    rng_proxy = np.random.default_rng(s_proxy)
    rng_health = np.random.default_rng(s_health)

    tp = config.true_params
    field = simulate_field(tp, geometry.grid, config.T, rng_field, members=geometry.members)
    monitors = simulate_monitors(
        field,
        config.sparse,
        tp,
        rng_mon,
        geometry.grid,
        monitor_fraction=config.monitor_fraction,
        sparse_monitor_count=config.sparse_monitor_count,
    )
    x_tilde = simulate_proxy(field, tp, rng_proxy)
    health = simulate_health(field.block_truth, tp, geometry.block_areas, rng_health)
    obs = ObservationSet(
        monitor_locations=monitors.locations,
        w=monitors.w,
        proxy_centroids=geometry.centroids,
        x_tilde=x_tilde,
        z=np.vstack([field.z[monitors.cell_indices], field.z]),
    )
    return field, monitors, health, obs, np.random.default_rng(s_infer)


def run_replicate(config: ScenarioConfig, geometry: _Geometry, replicate: int) -> ReplicateRecord:
    """Simulate one replicate and run the full two-stage chain on it."""
    import scipy.sparse as sp

    field, monitors, health, obs, rng_infer = simulate_replicate(config, geometry, replicate)

    monitor_projector = build_projector(geometry.mesh, monitors.locations)
    projector = Projector(
        matrix=sp.vstack(
            [monitor_projector.matrix, geometry.centroid_projector.matrix]
        ).tocsr(),
        points=obs.all_locations(),
    )
    fit1 = stage1_fit(obs, geometry.mesh, projector, _stage1_config(config))

    stage1_samples = {}
    stage1_samples.update(fit1.sample_fixed(config.K, rng_infer))
    stage1_samples.update(fit1.sample_hyper(config.K, rng_infer))

    stage2_samples = {}
    block_estimates = {}
    n_inner_failures = 0
    s2cfg = _stage2_config(config)
    for method in config.methods:
        pooled = propagate(
            fit1,
            geometry.blocks,
            geometry.grid,
            health,
            config.J,
            config.K,
            method,
            rng_infer,
            stage2_config=s2cfg,
            overlap_table=geometry.overlap,
            members=geometry.members,
        )
        stage2_samples[method] = pooled.samples
        block_estimates[method] = pooled.block_exposure_samples
        n_inner_failures += pooled.n_failures
    return ReplicateRecord(
        stage1_samples=stage1_samples,
        stage2_samples=stage2_samples,
        block_estimates=block_estimates,
        block_truth=health.xhatB,
        n_inner_failures=n_inner_failures,
    )


_WORKER_STATE: dict = {}


def _init_worker(config, geometry):
    _WORKER_STATE["config"] = config
    _WORKER_STATE["geometry"] = geometry


def _run_worker(replicate: int):
    try:
        record = run_replicate(
            _WORKER_STATE["config"], _WORKER_STATE["geometry"], replicate
        )
        return replicate, None, record
    except Exception as exc:  # failures are recorded, not fatal
        return replicate, repr(exc), None


def run_scenario(config: ScenarioConfig, n_workers: int = 1) -> MetricsReport:
    """Run all replicates of a scenario and aggregate the metrics.

    Fully deterministic for a fixed master seed: replicate seeds derive from
    the replicate index alone, results are aggregated in index order, and the
    worker count only changes scheduling.
    """
    geometry = build_geometry(config)
    indices = list(range(config.n_sim))
    outcomes = []
    if n_workers <= 1:
        for rep in indices:
            try:
                outcomes.append((rep, None, run_replicate(config, geometry, rep)))
            except Exception as exc:
                outcomes.append((rep, repr(exc), None))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(
            processes=n_workers, initializer=_init_worker, initargs=(config, geometry)
        ) as pool:
            outcomes = pool.map(_run_worker, indices)

    records = []
    n_failed = 0
    for rep, err, rec in sorted(outcomes, key=lambda o: o[0]):
        if rec is None:
            n_failed += 1
            logger.warning("replicate %d failed: %s", rep, err)
        else:
            records.append(rec)
    if n_failed > config.failure_budget * config.n_sim:
        raise ScenarioError(
            f"{n_failed}/{config.n_sim} replicates failed, over the budget of "
            f"{config.failure_budget:.0%}"
        )
    report = compute_metrics(
        records,
        config.true_params.as_dict(),
        block_ids=[b.id for b in geometry.blocks],
    )
    report.n_failed_replicates = n_failed
    return report
