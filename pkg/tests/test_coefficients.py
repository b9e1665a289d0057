import numpy as np
import pytest

from mvsde.coefficients import (
    BUILDERS,
    make_first_order,
    make_n_order,
    make_polynomial,
    make_scalar,
    validate_assumptions,
)
from mvsde.errors import ResourceError, UsageError
from mvsde.measures import EmpiricalMeasure, Mixture


def attraction_model():
    return make_first_order(
        bbar=lambda t, x, y: y - x,
        sbar=lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1] + (1, 1)),
    )


def two_point_measure():
    return EmpiricalMeasure(np.array([[0.2], [0.6]]))


def test_first_order_drift_at_dirac():
    model = attraction_model()
    b = model.eval_b(0.0, np.array([1.0]), EmpiricalMeasure.dirac(0.0))
    assert b == pytest.approx([-1.0])


def test_first_order_flat_db_is_centred_kernel():
    model = attraction_model()
    mu = two_point_measure()
    ys = np.linspace(-1, 1, 7)[:, None]
    flat = model.flat_db(0.0, np.array([0.3]), mu, ys)
    np.testing.assert_allclose(flat[:, 0], ys[:, 0] - 0.4, atol=1e-12)


def test_first_order_constant_sigma_gives_unit_a():
    model = attraction_model()
    for mu in (EmpiricalMeasure.dirac(0.0), two_point_measure()):
        a = model.eval_a(0.0, np.array([0.7]), mu)
        np.testing.assert_allclose(a, [[1.0]], atol=1e-12)


def test_eval_a_equals_sigma_sigma_t(rng):
    sbar = lambda t, x, y: np.stack(
        [np.stack([1.0 + 0.1 * np.sin(y[..., 0]), 0.2 + 0 * y[..., 0]], axis=-1),
         np.stack([0 * y[..., 0], 1.0 + 0.05 * y[..., 0] ** 2], axis=-1)],
        axis=-2)
    model = make_first_order(lambda t, x, y: y - x, sbar, dim_x=2, dim_w=2)
    mu = EmpiricalMeasure(rng.normal(size=(10, 2)))
    x = rng.normal(size=2)
    s = model.eval_sigma(0.1, x, mu)
    np.testing.assert_allclose(model.eval_a(0.1, x, mu), s @ s.T, atol=1e-12)


def test_n_order_reduces_to_first_order_bitwise():
    mu = two_point_measure()
    kernel_b = lambda t, x, y: y - x
    kernel_s = lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1] + (1, 1))
    first = make_first_order(kernel_b, kernel_s)
    n1 = make_n_order(1, lambda t, x, ys: kernel_b(t, x, ys[0]),
                      lambda t, x, ys: kernel_s(t, x, ys[0]))
    xs = np.array([[0.0], [0.5], [-1.2]])
    assert np.array_equal(first.eval_b(0.0, xs, mu), n1.eval_b(0.0, xs, mu))
    assert np.array_equal(first.eval_sigma(0.0, xs, mu),
                          n1.eval_sigma(0.0, xs, mu))


def test_n_order_product_drift():
    # bbar = y1 * y2, so b = mean^2 and the flat derivative is 2 m (y - m)
    model = make_n_order(
        2,
        lambda t, x, ys: (ys[0] * ys[1]) + 0.0 * x,
        lambda t, x, ys: np.ones(np.broadcast(x, ys[0]).shape[:-1] + (1, 1)),
    )
    mu = two_point_measure()  # mean 0.4
    b = model.eval_b(0.0, np.array([0.0]), mu)
    assert b == pytest.approx([0.16], abs=1e-12)
    flat = model.flat_db(0.0, np.array([0.0]), mu, np.array([1.0]))
    assert flat == pytest.approx([2 * 0.4 * 0.6], abs=1e-10)


def test_n_order_constant_kernel_flat_zero():
    model = make_n_order(
        2,
        lambda t, x, ys: np.ones(np.broadcast(x, ys[0]).shape[:-1] + (1,)) * 3.0,
        lambda t, x, ys: np.ones(np.broadcast(x, ys[0]).shape[:-1] + (1, 1)),
    )
    flat = model.flat_db(0.0, np.array([0.0]), two_point_measure(),
                         np.array([[0.5], [2.0]]))
    np.testing.assert_allclose(flat, 0.0, atol=1e-10)


def test_n_order_budget_guard():
    model = make_n_order(
        3,
        lambda t, x, ys: ys[0] + ys[1] + ys[2] + 0.0 * x,
        lambda t, x, ys: np.ones(np.broadcast(x, ys[0]).shape[:-1] + (1, 1)),
    )
    mu = EmpiricalMeasure(np.linspace(0, 1, 200)[:, None])
    with pytest.raises(ResourceError):
        model.eval_b(0.0, np.zeros((200, 1)), mu)


def test_scalar_second_moment_drift():
    model = make_scalar(
        psis=[lambda y: y[:, 0] ** 2],
        phis=[lambda y: np.zeros(y.shape[0])],
        bouter=lambda t, x, z: np.full(x.shape[:-1] + (1,), z[0]),
        souter=lambda t, x, z: np.ones(x.shape[:-1] + (1, 1)),
    )
    mu = two_point_measure()
    m2 = mu.moment2()
    b = model.eval_b(0.0, np.array([0.0]), mu)
    assert b == pytest.approx([m2], abs=1e-12)
    flat = model.flat_db(0.0, np.array([0.0]), mu, np.array([[0.9], [0.1]]))
    np.testing.assert_allclose(flat[:, 0], [0.81 - m2, 0.01 - m2], atol=1e-8)


def test_scalar_sigma_flat_matches_convex_perturbation_fd():
    model = make_scalar(
        psis=[lambda y: y[:, 0]],
        phis=[lambda y: np.sin(y[:, 0])],
        bouter=lambda t, x, z: np.full(x.shape[:-1] + (1,), z[0]),
        souter=lambda t, x, z: np.full(x.shape[:-1] + (1, 1),
                                       1.0 + z[0] ** 2 / (2.0 + z[0] ** 2)),
    )
    rng = np.random.default_rng(3)
    mu = EmpiricalMeasure(rng.normal(size=(16, 1)))
    t, x = 0.0, np.array([0.2])

    def lifted_a(measure):
        return model.eval_a(t, x, measure)[0, 0]

    def fd_richardson(y, eps=1e-4):
        out = []
        for e in (eps, 0.5 * eps):
            mix = Mixture([(1 - e, mu), (e, EmpiricalMeasure.dirac(y))])
            out.append((lifted_a(mix) - lifted_a(mu)) / e)
        return 2 * out[1] - out[0]

    centring = float(mu.weights @ np.array([fd_richardson(yi[0])
                                            for yi in mu.points]))
    for y in (-0.7, 0.4, 1.3):
        flat = model.flat_da(t, x, mu, np.array([y]))[0, 0]
        assert flat == pytest.approx(fd_richardson(y) - centring, abs=1e-5)


def test_scalar_constant_outer_zero_flats():
    model = make_scalar(
        psis=[lambda y: y[:, 0]],
        phis=[lambda y: y[:, 0]],
        bouter=lambda t, x, z: np.ones(x.shape[:-1] + (1,)),
        souter=lambda t, x, z: np.ones(x.shape[:-1] + (1, 1)),
    )
    mu = two_point_measure()
    ys = np.array([[0.1], [0.5]])
    np.testing.assert_allclose(model.flat_db(0.0, np.array([0.0]), mu, ys),
                               0.0, atol=1e-9)
    np.testing.assert_allclose(model.flat_da(0.0, np.array([0.0]), mu, ys),
                               0.0, atol=1e-9)


def test_polynomial_square_of_mean():
    model = make_polynomial(
        hbars_b=[lambda t, x, y: y[..., 0] + 0.0 * x[..., 0]] * 2,
        hbars_sigma=[lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1])],
    )
    mu = two_point_measure()
    b = model.eval_b(0.0, np.array([0.0]), mu)
    assert b == pytest.approx([0.16], abs=1e-12)
    flat = model.flat_db(0.0, np.array([0.0]), mu, np.array([1.0]))
    assert flat == pytest.approx([0.48], abs=1e-10)


def test_polynomial_agrees_with_n_order_example():
    poly = make_polynomial(
        hbars_b=[lambda t, x, y: y[..., 0] + 0.0 * x[..., 0]] * 2,
        hbars_sigma=[lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1])],
    )
    nord = make_n_order(
        2,
        lambda t, x, ys: (ys[0] * ys[1]) + 0.0 * x,
        lambda t, x, ys: np.ones(np.broadcast(x, ys[0]).shape[:-1] + (1, 1)),
    )
    mu = two_point_measure()
    for y in (-0.5, 0.3, 1.7):
        p = poly.flat_db(0.0, np.array([0.0]), mu, np.array([y]))
        n = nord.flat_db(0.0, np.array([0.0]), mu, np.array([y]))
        assert p == pytest.approx(n, abs=1e-10)


def test_polynomial_zero_factor_annihilates():
    model = make_polynomial(
        hbars_b=[lambda t, x, y: y[..., 0] + 0.0 * x[..., 0],
                 lambda t, x, y: np.zeros(np.broadcast(x, y).shape[:-1])],
        hbars_sigma=[lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1])],
    )
    mu = two_point_measure()
    assert model.eval_b(0.0, np.array([0.3]), mu) == pytest.approx([0.0])
    flat = model.flat_db(0.0, np.array([0.3]), mu, np.array([[2.0], [0.1]]))
    np.testing.assert_allclose(flat, 0.0, atol=1e-12)


def test_flat_normalization_across_builders(rng):
    mu = EmpiricalMeasure(rng.normal(size=(12, 1)))
    models = [
        attraction_model(),
        make_scalar(
            psis=[lambda y: y[:, 0]],
            phis=[lambda y: np.sin(y[:, 0])],
            bouter=lambda t, x, z: np.full(x.shape[:-1] + (1,), z[0] ** 2),
            souter=lambda t, x, z: np.full(x.shape[:-1] + (1, 1), 1.0 + z[0] ** 2),
        ),
        make_polynomial(
            hbars_b=[lambda t, x, y: np.cos(y[..., 0]) + 0.0 * x[..., 0]] * 2,
            hbars_sigma=[lambda t, x, y: 2.0 + np.sin(y[..., 0])],
        ),
    ]
    x = np.array([0.4])
    for model in models:
        if model.flat_db is not None:
            vals = model.flat_db(0.3, x, mu, mu.points)
            assert float(mu.weights @ vals[:, 0]) == pytest.approx(0.0, abs=1e-9)
        if model.flat_da is not None:
            vals = model.flat_da(0.3, x, mu, mu.points)
            mean = np.tensordot(mu.weights, vals, axes=(0, 0))
            np.testing.assert_allclose(mean, 0.0, atol=1e-8)


def test_validate_assumptions_identity_sigma():
    model = attraction_model()
    samples = [(0.0, [0.0]), (0.5, [1.0]), (1.0, [-2.0])]
    report = validate_assumptions(model, samples, [two_point_measure()])
    assert report.lambda_min == pytest.approx(1.0, abs=1e-10)
    assert report.lambda_max == pytest.approx(1.0, abs=1e-10)
    assert all(report.passed.values())


def test_validate_assumptions_sine_diffusion():
    model = make_first_order(
        bbar=lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
        sbar=lambda t, x, y: np.sqrt(1.0 + 0.5 * np.sin(x))[..., None] + 0.0 * y[..., None],
    )
    xs = np.linspace(-np.pi, np.pi, 41)
    samples = [(0.0, [x]) for x in xs]
    report = validate_assumptions(model, samples, [two_point_measure()])
    assert report.lambda_min == pytest.approx(0.5, abs=0.01)
    assert report.lambda_max == pytest.approx(1.5, abs=0.01)
    assert report.holder_eta_a == pytest.approx(1.0, abs=0.05)


def test_validate_assumptions_measure_free_drift_has_zero_tv_constant(ou_model):
    samples = [(0.0, [0.5]), (0.2, [-0.3])]
    report = validate_assumptions(ou_model, samples, [two_point_measure()])
    assert report.tv_lipschitz_b == pytest.approx(0.0, abs=1e-12)


def test_validate_assumptions_rejects_empty_sampler(ou_model):
    with pytest.raises(UsageError):
        validate_assumptions(ou_model, [], [two_point_measure()])


def test_builder_registry_complete():
    assert set(BUILDERS) == {"first_order", "n_order", "scalar", "polynomial"}
