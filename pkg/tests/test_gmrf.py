import numpy as np
import pytest
import scipy.sparse as sp

from stfuse.gmrf import (
    Ar1Params,
    FactorizationError,
    MaternParams,
    ResourceLimitError,
    SparsePrecision,
    ar1_precision,
    kron_precision,
    marginal_variances,
    matern_cov,
    sample,
    spde_precision,
)
from stfuse.mesh import assemble_fem, build_mesh


def random_spd(n, rng, density=0.3):
    a = sp.random(n, n, density=density, random_state=rng.integers(2**31))
    m = (a @ a.T).toarray() + n * np.eye(n)
    return sp.csc_matrix(m)


def test_matern_params_kappa_relation():
    p = MaternParams(sigma2_omega=1.5, rho=1.89)
    assert p.kappa * p.rho == pytest.approx(np.sqrt(8.0), abs=1e-12)
    with pytest.raises(ValueError):
        MaternParams(sigma2_omega=-1.0, rho=1.0)
    with pytest.raises(ValueError):
        MaternParams(sigma2_omega=1.0, rho=1.0, nu=2)


def test_matern_cov_at_zero_and_range():
    p = MaternParams(sigma2_omega=2.5, rho=1.89)
    assert matern_cov(0.0, p) == pytest.approx(2.5)
    corr = matern_cov(1.89, MaternParams(sigma2_omega=1.0, rho=1.89))
    assert 0.09 <= corr <= 0.17  # "around 0.1" at the range distance


def test_matern_cov_against_independent_bessel():
    # frozen from mpmath (dps=40): 1.5 * kd * besselk(1, kd) at kd = sqrt(8)/2
    p = MaternParams(sigma2_omega=1.5, rho=1.89)
    assert matern_cov(1.89 / 2.0, p) == pytest.approx(0.66651378544835406, rel=1e-12)


def test_matern_cov_vectorized_and_negative_rejected():
    p = MaternParams(sigma2_omega=1.0, rho=1.0)
    vals = matern_cov(np.array([0.0, 0.5, 1.0]), p)
    assert vals.shape == (3,)
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ValueError):
        matern_cov(-0.1, p)


def test_ar1_precision_small_cases():
    q1 = ar1_precision(Ar1Params(varsigma=0.7, T=1))
    np.testing.assert_allclose(q1.dense(), [[1 - 0.49]], atol=1e-14)

    # T=2: invert the stationary covariance [[1, s], [s, 1]] / (1 - s^2) by hand
    q2 = ar1_precision(Ar1Params(varsigma=0.5, T=2))
    np.testing.assert_allclose(q2.dense(), [[1.0, -0.5], [-0.5, 1.0]], atol=1e-14)

    q0 = ar1_precision(Ar1Params(varsigma=0.0, T=4))
    np.testing.assert_allclose(q0.dense(), np.eye(4), atol=1e-14)

    with pytest.raises(ValueError):
        Ar1Params(varsigma=1.0, T=3)


def test_ar1_precision_matches_dense_covariance_inverse():
    s, T = 0.7, 6
    q = ar1_precision(Ar1Params(varsigma=s, T=T)).dense()
    cov = np.array([[s ** abs(i - j) for j in range(T)] for i in range(T)]) / (1 - s * s)
    np.testing.assert_allclose(q @ cov, np.eye(T), atol=1e-12)


def test_kron_precision_ordering_and_logdet():
    rng = np.random.default_rng(0)
    qs = SparsePrecision(random_spd(5, rng))
    qt = ar1_precision(Ar1Params(varsigma=0.6, T=3))
    qk = kron_precision(qs, qt)
    # time-outer/space-inner: entry (t, d) at index t*D + d
    np.testing.assert_allclose(qk.dense(), np.kron(qt.dense(), qs.dense()), atol=1e-12)
    expected = qt.dim * qs.logdet + qs.dim * qt.logdet
    dense_logdet = np.linalg.slogdet(qk.dense())[1]
    assert qk.logdet == pytest.approx(expected, rel=1e-8)
    assert qk.logdet == pytest.approx(dense_logdet, rel=1e-8)


def test_kron_precision_identity_time_gives_block_diagonal():
    rng = np.random.default_rng(1)
    qs = SparsePrecision(random_spd(4, rng))
    qt = SparsePrecision(sp.identity(3, format="csc"))
    qk = kron_precision(qs, qt)
    dense = qk.dense()
    for t in range(3):
        np.testing.assert_allclose(dense[4 * t : 4 * t + 4, 4 * t : 4 * t + 4], qs.dense())
    off = dense.copy()
    for t in range(3):
        off[4 * t : 4 * t + 4, 4 * t : 4 * t + 4] = 0
    assert np.abs(off).max() == 0


def test_kron_precision_size_cap():
    rng = np.random.default_rng(2)
    qs = SparsePrecision(random_spd(10, rng))
    with pytest.raises(ResourceLimitError):
        kron_precision(qs, qs, max_dim=50)


def test_sample_identity_returns_raw_normals():
    q = SparsePrecision(sp.identity(3, format="csc"))
    draw = sample(q, np.random.default_rng(123))
    raw = np.random.default_rng(123).standard_normal((3, 1)).ravel()
    np.testing.assert_allclose(draw, raw, atol=1e-14)


def test_sample_determinism_and_covariance():
    rng = np.random.default_rng(5)
    q = SparsePrecision(random_spd(5, rng))
    a = q.sample(np.random.default_rng(42), n=7)
    b = q.sample(np.random.default_rng(42), n=7)
    np.testing.assert_array_equal(a, b)

    draws = q.sample(np.random.default_rng(7), n=10_000)
    emp = np.cov(draws)
    target = np.linalg.inv(q.dense())
    rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
    assert rel < 0.10


def test_marginal_variances_diagonal_and_dense_oracle():
    q = SparsePrecision(sp.diags([4.0, 5.0]).tocsc())
    np.testing.assert_allclose(marginal_variances(q), [0.25, 0.2], atol=1e-14)

    rng = np.random.default_rng(9)
    q10 = SparsePrecision(random_spd(10, rng))
    np.testing.assert_allclose(
        q10.marginal_variances(), np.diag(np.linalg.inv(q10.dense())), atol=1e-8
    )


def test_marginal_variances_kron_repeats_spatial_block():
    rng = np.random.default_rng(11)
    qs = SparsePrecision(random_spd(4, rng))
    qt = SparsePrecision(sp.identity(3, format="csc"))
    qk = kron_precision(qs, qt)
    mv = qk.marginal_variances()
    np.testing.assert_allclose(mv[:4], mv[4:8], atol=1e-10)
    np.testing.assert_allclose(mv[:4], mv[8:12], atol=1e-10)


def test_marginal_variances_permutation_invariance():
    rng = np.random.default_rng(13)
    q = random_spd(8, rng)
    perm = rng.permutation(8)
    mv = SparsePrecision(q).marginal_variances()
    mv_p = SparsePrecision(q[perm][:, perm]).marginal_variances()
    np.testing.assert_allclose(mv_p, mv[perm], atol=1e-10)


def test_sampling_recovers_precision():
    rng = np.random.default_rng(17)
    q = SparsePrecision(random_spd(5, rng))
    draws = q.sample(np.random.default_rng(23), n=20_000)
    emp_prec = np.linalg.inv(np.cov(draws))
    rel = np.linalg.norm(emp_prec - q.dense()) / np.linalg.norm(q.dense())
    assert rel < 0.10


def test_factorization_rejects_indefinite():
    m = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalues 3, -1
    with pytest.raises(FactorizationError):
        SparsePrecision(m).factor()


def test_precision_requires_symmetry():
    with pytest.raises(ValueError):
        SparsePrecision(sp.csc_matrix(np.array([[1.0, 0.5], [0.0, 1.0]])))


def test_logdet_matches_dense():
    rng = np.random.default_rng(19)
    q = SparsePrecision(random_spd(12, rng))
    assert q.logdet == pytest.approx(np.linalg.slogdet(q.dense())[1], rel=1e-8)


def test_solve_accuracy():
    rng = np.random.default_rng(21)
    q = SparsePrecision(random_spd(30, rng))
    b = rng.standard_normal(30)
    x = q.solve(b)
    np.testing.assert_allclose(q.matrix @ x, b, atol=1e-10)


def test_matrix_market_dump(tmp_path):
    q = SparsePrecision(sp.diags([1.0, 2.0, 3.0]).tocsc())
    path = tmp_path / "q.mtx"
    q.to_matrix_market(path)
    from scipy.io import mmread

    back = mmread(path)
    np.testing.assert_allclose(back.toarray(), q.dense())


def test_spde_precision_matches_matern_covariance():
    # interior-node covariances from Q^{ -1 } should track the closed form
    p = MaternParams(sigma2_omega=1.5, rho=1.89)
    hull = np.array([[0.0, 0.0], [9.0, 0.0], [9.0, 9.0], [0.0, 9.0]])
    mesh = build_mesh(hull, max_edge=p.rho / 5, buffer=1.2)
    fem = assemble_fem(mesh)
    q = spde_precision(fem, p)

    center = np.array([4.5, 4.5])
    i0 = int(np.argmin(np.linalg.norm(mesh.vertices - center, axis=1)))
    col = np.zeros(q.dim)
    col[i0] = 1.0
    cov_col = q.solve(col)

    dists = np.linalg.norm(mesh.vertices - mesh.vertices[i0], axis=1)
    near = np.abs(dists - p.rho) < 0.05
    assert near.sum() > 0
    emp = cov_col[near].mean()
    assert abs(emp - matern_cov(p.rho, p)) <= 0.05 * p.sigma2_omega

    # doubling kappa (halving rho) should halve the correlation length
    p2 = MaternParams(sigma2_omega=1.5, rho=1.89 / 2)
    q2 = spde_precision(fem, p2)
    cov2 = q2.solve(col)

    def empirical_range(cov_vals):
        corr = cov_vals / cov_vals[i0]
        order = np.argsort(dists)
        below = corr[order] < 0.1
        first = np.argmax(below[1:]) + 1
        return dists[order][first]

    r1 = empirical_range(cov_col)
    r2 = empirical_range(cov2)
    assert r2 == pytest.approx(r1 / 2, rel=0.25)


def test_spde_precision_symmetric_positive_diagonal():
    mesh = build_mesh(np.array([[0, 0], [2, 0], [2, 2], [0, 2]]), max_edge=0.5, buffer=0.0)
    fem = assemble_fem(mesh)
    q = spde_precision(fem, MaternParams(sigma2_omega=1.0, rho=1.0))
    m = q.matrix
    assert (abs(m - m.T)).max() < 1e-12
    assert np.all(m.diagonal() > 0)
