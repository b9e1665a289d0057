import numpy as np
import pytest
from scipy.stats import norm

from mvsde.errors import DomainError, ResourceError, UsageError
from mvsde.kernels import gauss_eval_iso
from mvsde.measures import (
    DensityGrid,
    EmpiricalMeasure,
    GridSpec,
    MeasureFlow,
    Mixture,
    d_eta,
    default_grid,
    kde,
    l1_density_distance,
    moment2,
    silverman_bandwidth,
    wasserstein2,
)


def gaussian_grid(mean, var, lo=-9.0, hi=9.0, n=4097):
    spec = GridSpec.from_bounds([lo], [hi], [n])
    x = spec.nodes()[:, 0]
    vals = np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
    return DensityGrid(spec, vals, normalize=True)


def test_empirical_weight_validation():
    with pytest.raises(DomainError):
        EmpiricalMeasure([[0.0], [1.0]], [0.7, 0.5])
    with pytest.raises(DomainError):
        EmpiricalMeasure([[0.0], [1.0]], [-0.5, 1.5])
    with pytest.raises(DomainError):
        EmpiricalMeasure([[np.inf]])


def test_wasserstein2_diracs():
    assert wasserstein2(EmpiricalMeasure.dirac(0.0),
                        EmpiricalMeasure.dirac(2.0)) == pytest.approx(2.0)


def test_wasserstein2_identical_measures(small_cloud):
    assert wasserstein2(small_cloud, small_cloud) == pytest.approx(0.0, abs=1e-12)


def test_wasserstein2_uniform_shift():
    mu = EmpiricalMeasure(np.array([[0.0], [1.0]]))
    nu = EmpiricalMeasure(np.array([[1.0], [2.0]]))
    assert wasserstein2(mu, nu) == pytest.approx(1.0)


def test_wasserstein2_matches_lp_in_2d(rng):
    # 1-d clouds embedded in 2-d exercise the LP path against the exact
    # quantile coupling
    x = rng.normal(size=(12, 1))
    y = rng.normal(size=(9, 1)) + 0.5
    mu1, nu1 = EmpiricalMeasure(x), EmpiricalMeasure(y)
    mu2 = EmpiricalMeasure(np.hstack([x, np.zeros_like(x)]))
    nu2 = EmpiricalMeasure(np.hstack([y, np.zeros_like(y)]))
    assert wasserstein2(mu2, nu2) == pytest.approx(wasserstein2(mu1, nu1), abs=1e-8)


def test_wasserstein2_dimension_mismatch():
    with pytest.raises(UsageError):
        wasserstein2(EmpiricalMeasure.dirac(0.0),
                     EmpiricalMeasure(np.zeros((1, 2))))


def test_wasserstein2_permutation_invariant(rng):
    pts = rng.normal(size=(20, 1))
    w = rng.uniform(0.5, 1.5, size=20)
    w /= w.sum()
    perm = rng.permutation(20)
    mu = EmpiricalMeasure(pts, w)
    mu_p = EmpiricalMeasure(pts[perm], w[perm])
    nu = EmpiricalMeasure(rng.normal(size=(15, 1)) + 1.0)
    assert wasserstein2(mu, nu) == pytest.approx(wasserstein2(mu_p, nu), rel=1e-12)


def test_wasserstein2_triangle_inequality(rng):
    for _ in range(10):
        clouds = [EmpiricalMeasure(rng.normal(size=(8, 1)) + rng.normal())
                  for _ in range(3)]
        d01 = wasserstein2(clouds[0], clouds[1])
        d12 = wasserstein2(clouds[1], clouds[2])
        d02 = wasserstein2(clouds[0], clouds[2])
        assert d02 <= d01 + d12 + 1e-9


def test_d_eta_examples():
    assert d_eta(EmpiricalMeasure.dirac(1.0), EmpiricalMeasure.dirac(1.0),
                 1.0) == pytest.approx(0.0, abs=1e-10)
    assert d_eta(EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(2.0),
                 1.0) == pytest.approx(1.0, abs=1e-9)
    assert d_eta(EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(0.25),
                 0.5) == pytest.approx(0.5, abs=1e-9)


def test_d_eta_capped_at_one(rng):
    for _ in range(5):
        mu = EmpiricalMeasure(rng.normal(size=(6, 1)) * 10)
        nu = EmpiricalMeasure(rng.normal(size=(7, 1)) * 10 + 50)
        assert d_eta(mu, nu, 0.7) <= 1.0 + 1e-9


def test_d_eta_triangle_inequality(rng):
    for _ in range(10):
        clouds = [EmpiricalMeasure(rng.normal(size=(5, 1)) + rng.normal())
                  for _ in range(3)]
        d01 = d_eta(clouds[0], clouds[1], 0.5)
        d12 = d_eta(clouds[1], clouds[2], 0.5)
        d02 = d_eta(clouds[0], clouds[2], 0.5)
        assert d02 <= d01 + d12 + 1e-9


def test_d_eta_budget_guard(rng):
    mu = EmpiricalMeasure(rng.normal(size=(150, 1)))
    nu = EmpiricalMeasure(rng.normal(size=(150, 1)))
    with pytest.raises(ResourceError):
        d_eta(mu, nu, 1.0)


def test_d_eta_domain_error():
    with pytest.raises(DomainError):
        d_eta(EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(1.0), 1.5)


def test_l1_distance_identical():
    p = gaussian_grid(0.0, 1.0)
    assert l1_density_distance(p, p) == pytest.approx(0.0, abs=1e-14)


def test_l1_distance_disjoint_supports():
    spec = GridSpec.from_bounds([-4.0], [4.0], [2001])
    x = spec.nodes()[:, 0]
    left = np.where(x < -0.5, np.exp(-0.5 * (x + 2) ** 2 / 0.01), 0.0)
    right = np.where(x > 0.5, np.exp(-0.5 * (x - 2) ** 2 / 0.01), 0.0)
    p = DensityGrid(spec, left, normalize=True)
    q = DensityGrid(spec, right, normalize=True)
    assert l1_density_distance(p, q) == pytest.approx(2.0, abs=1e-9)


def test_l1_distance_shifted_gaussians():
    # closed form: int |N(0,1) - N(0.1,1)| = 2 (2 Phi(0.05) - 1)
    p = gaussian_grid(0.0, 1.0)
    q = gaussian_grid(0.1, 1.0)
    oracle = 2.0 * (2.0 * norm.cdf(0.05) - 1.0)
    assert oracle == pytest.approx(0.0797556, abs=2e-6)
    assert l1_density_distance(p, q) == pytest.approx(oracle, abs=1e-6)


def test_l1_distance_grid_mismatch():
    p = gaussian_grid(0.0, 1.0, n=512)
    q = gaussian_grid(0.0, 1.0, n=1024)
    with pytest.raises(UsageError):
        l1_density_distance(p, q)


def test_l1_bounded_by_two(rng):
    for _ in range(5):
        p = gaussian_grid(rng.uniform(-3, 3), rng.uniform(0.2, 2.0))
        q = gaussian_grid(rng.uniform(-3, 3), rng.uniform(0.2, 2.0))
        assert l1_density_distance(p, q) <= 2.0 + 1e-9


def test_moment2_dirac():
    assert moment2(EmpiricalMeasure.dirac(3.0)) == pytest.approx(9.0)


def test_moment2_two_points():
    mu = EmpiricalMeasure(np.array([[-1.0], [1.0]]))
    assert moment2(mu) == pytest.approx(1.0)


def test_moment2_gaussian_grid():
    spec = GridSpec.from_bounds([-8.0], [8.0], [2048])
    x = spec.nodes()[:, 0]
    p = DensityGrid(spec, np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi),
                    normalize=True)
    assert moment2(p) == pytest.approx(1.0, abs=1e-4)


def test_kde_single_particle_recovers_kernel():
    h = 0.5
    spec = GridSpec.from_bounds([-6.0], [6.0], [1201])
    grid = kde(EmpiricalMeasure.dirac(0.0), spec, bandwidth=h)
    x = spec.nodes()
    expected = np.array([gauss_eval_iso(h ** 2, xi) for xi in x])
    np.testing.assert_allclose(grid.values.ravel(), expected, rtol=1e-6)


def test_kde_symmetric_particles_even_density():
    spec = GridSpec.from_bounds([-5.0], [5.0], [1001])
    mu = EmpiricalMeasure(np.array([[-1.0], [1.0]]))
    grid = kde(mu, spec, bandwidth=0.3)
    np.testing.assert_allclose(grid.values.ravel(),
                               grid.values.ravel()[::-1], atol=1e-12)


def test_kde_large_sample_close_to_truth():
    rng = np.random.default_rng(7)
    sample = rng.normal(size=(100_000, 1))
    mu = EmpiricalMeasure(sample)
    spec = GridSpec.from_bounds([-9.0], [9.0], [2049])
    est = kde(mu, spec)
    x = spec.nodes()[:, 0]
    truth = DensityGrid(spec, np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi),
                        normalize=True)
    assert l1_density_distance(est, truth) <= 0.05


def test_kde_empty_and_bad_bandwidth():
    spec = GridSpec.from_bounds([-1.0], [1.0], [11])
    with pytest.raises(UsageError):
        kde(EmpiricalMeasure.dirac(0.0), spec, bandwidth=-1.0)


def test_silverman_bandwidth_positive(rng):
    bw = silverman_bandwidth(rng.normal(size=(500, 2)))
    assert np.all(bw > 0)


def test_density_grid_rejects_negative_values():
    spec = GridSpec.from_bounds([-1.0], [1.0], [11])
    with pytest.raises(DomainError):
        DensityGrid(spec, -np.ones(11))


def test_density_grid_normalize():
    spec = GridSpec.from_bounds([-1.0], [1.0], [101])
    g = DensityGrid(spec, np.ones(101), normalize=True)
    assert g.integral() == pytest.approx(1.0, abs=1e-12)


def test_grid_serialization_round_trip(tmp_path):
    g = gaussian_grid(0.0, 1.0, n=257)
    csv = tmp_path / "grid.csv"
    hdr = tmp_path / "grid.json"
    g.to_csv(csv, hdr)
    rows = np.loadtxt(csv, delimiter=",", skiprows=1)
    np.testing.assert_allclose(rows[:, 1], g.values.ravel())
    mu = EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
    mu.to_csv(tmp_path / "cloud.csv")
    rows = np.loadtxt(tmp_path / "cloud.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(rows[:, 1], [0.25, 0.75])


def test_measure_flow_validation():
    mu = EmpiricalMeasure.dirac(0.0)
    with pytest.raises(UsageError):
        MeasureFlow([0.0, 0.0, 1.0], [mu, mu, mu])
    with pytest.raises(UsageError):
        MeasureFlow([0.0, 1.0], [mu])
    flow = MeasureFlow.constant([0.0, 0.5, 1.0], mu)
    assert flow.state_at(0.6) is mu
    assert flow.covers(0.0, 1.0)
    assert not flow.covers(0.0, 2.0)


def test_mixture_integrates_convex_combination():
    mu = EmpiricalMeasure.dirac(0.0)
    nu = EmpiricalMeasure.dirac(2.0)
    mix = Mixture([(0.75, mu), (0.25, nu)])
    assert mix.moment2() == pytest.approx(1.0)
    assert mix.integrate(lambda p: p[:, 0]) == pytest.approx(0.5)


def test_default_grid_shape():
    spec = default_grid([0.0], [1.0], 101)
    assert spec.shape == (101,)
    assert spec.axes()[0][0] == pytest.approx(-8.0)
    assert spec.axes()[0][-1] == pytest.approx(8.0)
