import numpy as np
import pytest
from scipy.special import erfc

from mvsde.errors import DomainError, RangeError
from mvsde.kernels import (
    gauss_eval,
    gauss_eval_iso,
    hermite1,
    hermite2,
    hermite_decay_sup,
    mittag_leffler,
    mittag_leffler_inverse,
    spacetime_sup,
)


def test_gauss_eval_standard_1d():
    assert gauss_eval([[1.0]], [0.0]) == pytest.approx(0.3989422804, abs=1e-9)


def test_gauss_eval_standard_2d():
    assert gauss_eval(np.eye(2), [0.0, 0.0]) == pytest.approx(0.1591549431, abs=1e-9)


def test_gauss_eval_scaled():
    assert gauss_eval([[4.0]], [2.0]) == pytest.approx(0.1209853623, abs=1e-9)


def test_gauss_eval_iso_matches_matrix_form(rng):
    for _ in range(20):
        c = float(rng.uniform(0.05, 3.0))
        x = rng.normal(size=2)
        assert gauss_eval_iso(c, x) == pytest.approx(gauss_eval(c * np.eye(2), x),
                                                     rel=1e-12)


def test_gauss_eval_rejects_non_pd():
    with pytest.raises(DomainError):
        gauss_eval([[0.0]], [0.0])
    with pytest.raises(DomainError):
        gauss_eval([[1.0, 2.0], [2.0, 1.0]], [0.0, 0.0])


def test_gauss_eval_rejects_asymmetric():
    with pytest.raises(DomainError):
        gauss_eval([[1.0, 0.5], [0.1, 1.0]], [0.0, 0.0])


def test_hermite1_identity_covariance():
    np.testing.assert_allclose(hermite1(np.eye(2), [1.0, 2.0]), [-1.0, -2.0],
                               atol=1e-12)


def test_hermite1_at_origin():
    np.testing.assert_allclose(hermite1([[3.7]], [0.0]), [0.0], atol=1e-15)


def test_hermite1_scaled():
    np.testing.assert_allclose(hermite1([[2.0]], [4.0]), [-2.0], atol=1e-12)


def test_hermite2_examples():
    np.testing.assert_allclose(hermite2([[1.0]], [0.0]), [[-1.0]], atol=1e-12)
    np.testing.assert_allclose(hermite2([[1.0]], [1.0]), [[0.0]], atol=1e-12)
    np.testing.assert_allclose(hermite2(np.eye(2), [1.0, 0.0]),
                               [[0.0, 0.0], [0.0, -1.0]], atol=1e-12)


def _random_pd(rng, d):
    m = rng.normal(size=(d, d))
    return m @ m.T + 0.3 * np.eye(d)


def test_gaussian_normalization_quadrature(rng):
    for d in (1, 2):
        for _ in range(3):
            sigma = _random_pd(rng, d)
            lam = np.linalg.eigvalsh(sigma).max()
            half = 8.0 * np.sqrt(lam)
            n = 401 if d == 1 else 201
            axes = [np.linspace(-half, half, n)] * d
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=-1)
            vals = np.array([gauss_eval(sigma, p) for p in pts]).reshape([n] * d)
            total = vals
            for _ax in range(d):
                total = np.trapezoid(total, dx=axes[0][1] - axes[0][0], axis=0)
            assert total == pytest.approx(1.0, abs=1e-6)


def test_hermite_factors_match_finite_differences(rng):
    h1_step, h2_step = 1e-5, 4e-4
    for _ in range(100):
        d = int(rng.integers(1, 3))
        sigma = _random_pd(rng, d)
        x = rng.normal(size=d)
        g0 = gauss_eval(sigma, x)
        h1 = hermite1(sigma, x)
        h2 = hermite2(sigma, x)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h1_step
            fd1 = (gauss_eval(sigma, x + e) - gauss_eval(sigma, x - e)) / (2 * h1_step)
            assert fd1 == pytest.approx(h1[i] * g0, abs=1e-6)
            e[i] = h2_step
            fd2 = (gauss_eval(sigma, x + e) - 2 * g0
                   + gauss_eval(sigma, x - e)) / h2_step ** 2
            assert fd2 == pytest.approx(h2[i, i] * g0, abs=1e-6)


def test_mittag_leffler_exponential():
    assert mittag_leffler(1.0, 1.0, 1.0) == pytest.approx(np.e, rel=1e-10)


def test_mittag_leffler_at_zero():
    assert mittag_leffler(0.5, 1.0, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_mittag_leffler_alpha1_beta2():
    # independent oracle: E_{1,2}(z) = (e^z - 1) / z
    z = 1.0
    oracle = (np.exp(z) - 1.0) / z
    assert mittag_leffler(1.0, 2.0, z) == pytest.approx(oracle, rel=1e-10)
    assert mittag_leffler(1.0, 2.0, z) == pytest.approx(1.7182818285, abs=1e-9)


def test_mittag_leffler_half_identity():
    # E_{1/2,1}(z) = exp(z^2) erfc(-z)
    for z in (0.3, 1.0, 2.0):
        oracle = np.exp(z ** 2) * erfc(-z)
        assert mittag_leffler(0.5, 1.0, z) == pytest.approx(oracle, rel=1e-9)


def test_mittag_leffler_negative_argument():
    # E_{1,1}(-1) = exp(-1)
    assert mittag_leffler(1.0, 1.0, -1.0) == pytest.approx(np.exp(-1.0), rel=1e-9)


def test_mittag_leffler_domain_and_range_errors():
    with pytest.raises(DomainError):
        mittag_leffler(-1.0, 1.0, 0.5)
    with pytest.raises(RangeError):
        mittag_leffler(1.0, 1.0, 800.0)


def test_mittag_leffler_inverse_round_trip():
    for z in (0.5, 2.0, 5.0):
        target = mittag_leffler(0.5, 1.0, z)
        assert mittag_leffler_inverse(0.5, 1.0, target) == pytest.approx(z, abs=1e-6)


def test_spacetime_inequality_stable_across_decades():
    xs = np.linspace(-10.0, 10.0, 81)[:, None]
    ts = np.geomspace(0.01, 1.0, 9)
    for p in (1, 2):
        sups = spacetime_sup(p, 1.0, ts, xs)
        decade_a = max(v for t, v in sups.items() if t <= 0.1)
        decade_b = max(v for t, v in sups.items() if t > 0.1)
        assert np.isfinite(decade_a) and np.isfinite(decade_b)
        ratio = max(decade_a, decade_b) / min(decade_a, decade_b)
        assert ratio <= 1.5


def test_standard_gaussian_derivative_estimate_bounded():
    xs = np.linspace(-10.0, 10.0, 81)[:, None]
    ts = np.geomspace(0.01, 1.0, 9)
    sups = hermite_decay_sup(1.0, ts, xs)
    vals = np.array(list(sups.values()))
    assert np.all(np.isfinite(vals))
    assert vals.max() / vals.min() <= 2.0
