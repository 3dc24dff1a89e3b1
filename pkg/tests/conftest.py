import numpy as np
import pytest

from stfuse.gmrf import Ar1Params, MaternParams, ar1_precision, kron_precision, spde_precision
from stfuse.mesh import assemble_fem, build_mesh, build_projector
from stfuse.stage1 import ObservationSet, Stage1Hyper


def square_hull(side):
    return np.array([[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]])


def make_tiny_setup(m=2, g=4, t=2, side=2.0, max_edge=None, seed=0):
    """Small fusion instance: mesh, projector and simulated observations.

    The proxy cells sit on a regular sub-grid of the square; monitors at
    random interior points.  Data are simulated exactly from the fusion model
    so self-consistency tests have a well-specified target.
    """
    rng = np.random.default_rng(seed)
    hull = square_hull(side)
    mesh = build_mesh(hull, max_edge=max_edge or side, buffer=0.25 * side)

    k = int(np.ceil(np.sqrt(g)))
    xs = (np.arange(k) + 0.5) * side / k
    cents = np.column_stack([np.tile(xs, k), np.repeat(xs, k)])[:g]
    monitors = rng.uniform(0.1 * side, 0.9 * side, size=(m, 2))

    hyper = Stage1Hyper(
        alpha1=1.5,
        sigma2_e=0.1,
        sigma2_delta=0.5,
        varsigma=0.6,
        sigma2_omega=1.0,
        rho=0.8 * side,
    )
    beta0, beta1, alpha0 = 0.3, 1.2, -0.5

    locs = np.vstack([monitors, cents])
    projector = build_projector(mesh, locs)

    fem = assemble_fem(mesh)
    qs = spde_precision(fem, MaternParams(sigma2_omega=hyper.sigma2_omega, rho=hyper.rho))
    qt = ar1_precision(Ar1Params(varsigma=hyper.varsigma, T=t))
    qk = kron_precision(qs, qt)
    xi = qk.sample(rng).reshape(t, mesh.n_vertices)

    z = rng.standard_normal((m + g, t))
    x_sites = np.empty((m + g, t))
    for tt in range(t):
        x_sites[:, tt] = beta0 + beta1 * z[:, tt] + projector.matrix @ xi[tt]

    w = x_sites[:m] + np.sqrt(hyper.sigma2_e) * rng.standard_normal((m, t))
    x_tilde = (
        alpha0
        + hyper.alpha1 * x_sites[m:]
        + np.sqrt(hyper.sigma2_delta) * rng.standard_normal((g, t))
    )
    obs = ObservationSet(
        monitor_locations=monitors,
        w=w,
        proxy_centroids=cents,
        x_tilde=x_tilde,
        z=z,
    )
    truth = dict(hyper=hyper, alpha0=alpha0, beta0=beta0, beta1=beta1, xi=xi, x_sites=x_sites)
    return obs, mesh, projector, truth


@pytest.fixture
def tiny_setup():
    return make_tiny_setup()
