import numpy as np
import pytest

from mvsde.coefficients import make_first_order, make_scalar
from mvsde.measures import EmpiricalMeasure


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


@pytest.fixture
def mean_field_ou():
    """Scalar-interaction model: b(t, x, mu) = mean(mu) - x, sigma = 1."""
    return make_scalar(
        psis=[lambda y: y[:, 0]],
        phis=[lambda y: np.zeros(y.shape[0])],
        bouter=lambda t, x, z: z[0] - x,
        souter=lambda t, x, z: np.ones(x.shape[:-1] + (1, 1)),
        name="mean_field_ou",
    )


@pytest.fixture
def heat_model():
    """b = 0, sigma = 1: plain Brownian motion."""
    return make_first_order(
        bbar=lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
        sbar=lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1] + (1, 1)),
        name="heat",
    )


@pytest.fixture
def ou_model():
    """Measure-free OU: b(x) = -x, sigma = 1."""
    return make_first_order(
        bbar=lambda t, x, y: -x + 0.0 * y,
        sbar=lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1] + (1, 1)),
        name="ou",
    )


@pytest.fixture
def small_cloud(rng):
    pts = rng.normal(size=(32, 1))
    return EmpiricalMeasure(pts)
