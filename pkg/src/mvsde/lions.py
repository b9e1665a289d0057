"""Numerical differentiation of functionals on the space of measures.

Flat derivatives come from convex perturbations toward point masses,
recentred so they integrate to zero against the base measure.  The stronger
derivative is estimated by the finite-population lifting: for a uniform cloud
of N particles, N times the partial derivative of the lifted map in one
particle coordinate estimates the derivative function at that particle.  The
two notions agree through the gradient relation

    (d/dy) flat(mu)(y) = lifted(mu)(y)

which check_flat_lions_relation measures on a sample of points.

The flow-composition half of the module turns a transition-density evaluator
into the derivative formulas for maps mu -> h(law at time T started from mu):
a boundary x-derivative integral plus a lifted-density integral, and the
matching time-derivative formula.
"""

import numpy as np

from .errors import UsageError
from .measures import EmpiricalMeasure, Mixture

_DEFAULT_EPS = 1e-4


class MeasureFunctional:
    """A real functional of measures with an optional analytic flat derivative."""

    def __init__(self, eval_fn, flat_derivative=None, name="functional"):
        self._eval = eval_fn
        self.flat_derivative = flat_derivative
        self.name = name

    def __call__(self, mu):
        return float(self._eval(mu))


def flat_derivative_fd(h, mu, y, eps=_DEFAULT_EPS, recenter=True,
                       richardson=False):
    """Convex-perturbation estimate of the flat derivative of h at (mu, y).

    [h((1-eps) mu + eps delta_y) - h(mu)] / eps, recentred by subtracting its
    mu-average so the result integrates to zero against mu.
    """
    if not 0.0 < eps < 1.0:
        raise UsageError("eps must lie in (0, 1)")
    base = h(mu)

    def raw(point):
        point = np.atleast_1d(np.asarray(point, dtype=float))
        est = []
        for e in ((eps, 0.5 * eps) if richardson else (eps,)):
            mix = Mixture([(1.0 - e, mu), (e, EmpiricalMeasure(point[None, :]))])
            est.append((h(mix) - base) / e)
        return 2.0 * est[1] - est[0] if richardson else est[0]

    val = raw(y)
    if not recenter:
        return float(val)
    from .coefficients import nodes_weights

    pts, w = nodes_weights(mu)
    centring = sum(wi * raw(p) for p, wi in zip(pts, w) if wi != 0.0)
    return float(val - centring)


def lions_derivative_empirical(h, mu, i, delta=None):
    """Finite-population lifting estimate of the derivative at particle i.

    Requires uniform weights: the lifted map of the N-point cloud is
    differentiated centrally in particle i and scaled by N.
    """
    if not isinstance(mu, EmpiricalMeasure):
        raise UsageError("empirical lifting needs a particle measure")
    n = mu.n
    if not np.allclose(mu.weights, 1.0 / n):
        raise UsageError("empirical lifting needs uniform weights")
    if not 0 <= i < n:
        raise UsageError("particle index out of range")
    x = mu.points
    out = np.empty(mu.dim)
    for j in range(mu.dim):
        step = delta if delta is not None else _DEFAULT_EPS * (1.0 + abs(x[i, j]))
        xp = x.copy()
        xm = x.copy()
        xp[i, j] += step
        xm[i, j] -= step
        hp = h(EmpiricalMeasure(xp))
        hm = h(EmpiricalMeasure(xm))
        out[j] = n * (hp - hm) / (2.0 * step)
    return out


def lions_second_derivative_empirical(h, mu, i, delta=None):
    """N times the second lifted partial in particle i (diagonal in v)."""
    if not isinstance(mu, EmpiricalMeasure) or \
            not np.allclose(mu.weights, 1.0 / mu.n):
        raise UsageError("empirical lifting needs a uniform particle measure")
    n = mu.n
    x = mu.points
    out = np.empty((mu.dim, mu.dim))
    h0 = h(mu)
    for j in range(mu.dim):
        step = delta if delta is not None else 3e-4 * (1.0 + abs(x[i, j]))
        xp = x.copy()
        xm = x.copy()
        xp[i, j] += step
        xm[i, j] -= step
        out[j, j] = n * (h(EmpiricalMeasure(xp)) - 2.0 * h0
                         + h(EmpiricalMeasure(xm))) / step ** 2
        for k in range(j + 1, mu.dim):
            raise UsageError("off-diagonal second lifting not implemented")
    return out


def check_flat_lions_relation(h, mu, sample_ys, eps=_DEFAULT_EPS,
                              delta=_DEFAULT_EPS):
    """Max gap between the y-gradient of the flat derivative and the lifted
    derivative, both evaluated on the cloud with a particle placed at y."""
    if not isinstance(mu, EmpiricalMeasure):
        raise UsageError("relation check operates on particle measures")
    worst = 0.0
    for y in sample_ys:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        cloud = EmpiricalMeasure(np.vstack([mu.points, y[None, :]]))
        if h.flat_derivative is not None:
            def flat(point):
                return h.flat_derivative(cloud, point)
        else:
            def flat(point):
                return flat_derivative_fd(h, cloud, point, eps=eps,
                                          recenter=False, richardson=True)
        grad = np.empty(len(y))
        for j in range(len(y)):
            e = np.zeros(len(y))
            e[j] = delta
            grad[j] = (flat(y + e) - flat(y - e)) / (2.0 * delta)
        lifted = lions_derivative_empirical(h, cloud, cloud.n - 1)
        worst = max(worst, float(np.max(np.abs(grad - lifted))))
    return worst


# ---------------------------------------------------------------------------
# flow composition


def constant_flow_solver(model, t, horizon_end, mu, nodes=9):
    """Freeze mu along [t, T]: exact whenever coefficients ignore the measure."""
    from .measures import MeasureFlow

    times = np.linspace(t, horizon_end, nodes)
    return MeasureFlow.constant(times, mu)


def picard_flow_solver_factory(picard_cfg_builder):
    """Adapter turning a PicardConfig builder into a flow solver callable."""
    from .picard import picard_solve

    def solver(model, t, horizon_end, mu):
        cfg = picard_cfg_builder(model, t, horizon_end, mu)
        flow, _ = picard_solve(model, cfg)
        return flow

    return solver


class FlowComposition:
    """h composed with the measure flow of the model over [t, T].

    Bundles the functional h (with a flat derivative), the model whose
    transition densities are built by the parametrix series, and a flow
    solver producing the frozen law flow started at (t, mu).
    """

    def __init__(self, h, model, horizon_end, pcfg, flow_solver=None):
        if h.flat_derivative is None:
            raise UsageError("flow composition needs a flat derivative for h")
        self.h = h
        self.model = model
        self.horizon_end = float(horizon_end)
        self.pcfg = pcfg
        self.flow_solver = flow_solver or constant_flow_solver

    def _evaluator(self, t, mu):
        from .parametrix import ParametrixEvaluator, ProxySpec

        flow = self.flow_solver(self.model, t, self.horizon_end, mu)
        return ParametrixEvaluator(ProxySpec(self.model, flow, t), self.pcfg)

    def transition_vector(self, t, mu, x, evaluator=None):
        """p(mu, t, T, x, .) raw series values on the config grid."""
        ev = evaluator or self._evaluator(t, mu)
        saved = self.pcfg.renormalize
        self.pcfg.renormalize = False
        try:
            dens = ev.density_series(self.horizon_end, float(x))
        finally:
            self.pcfg.renormalize = saved
        return np.sum(dens.terms, axis=0), ev

    def theta(self, t, mu, evaluator=None):
        """Pushforward law at time T started from (t, mu), as a grid density."""
        ev = evaluator or self._evaluator(t, mu)
        saved = self.pcfg.renormalize
        self.pcfg.renormalize = True
        try:
            return ev.density_of_law(self.horizon_end, mu), ev
        finally:
            self.pcfg.renormalize = saved

    def composed(self, t, mu):
        """h(Theta(t, mu)) as a plain number."""
        theta, _ = self.theta(t, mu)
        return self.h(theta)


def _flat_batch(h, mu, points):
    """Flat derivative at many points; vectorized when the callable allows."""
    pts = np.asarray(points, dtype=float).reshape(-1, 1)
    try:
        vals = np.asarray(h.flat_derivative(mu, pts), dtype=float).reshape(-1)
        if vals.shape == (pts.shape[0],):
            return vals
    except Exception:
        pass
    return np.array([float(h.flat_derivative(mu, p)) for p in pts])


def composed_flow_derivative(fc, t, mu, y, n=0, fd_step=None, lift_n=None,
                             lift_delta=2e-3):
    """Derivative of the composed map at (t, mu), evaluated at y.

    Sum of the boundary term (flat derivative differences against the (1+n)-th
    x-derivative of the density from y) and the lifted-density term (flat
    differences against the lifted derivative of the density, estimated on the
    atoms of mu and integrated).
    """
    if n not in (0, 1):
        raise UsageError("derivative order n must be 0 or 1")
    from .coefficients import nodes_weights

    ev = fc._evaluator(t, mu)
    grid = fc.pcfg.space_grid
    z = grid.nodes()[:, 0]
    trapw = grid.trapezoid_weights()
    theta, _ = fc.theta(t, mu, evaluator=ev)
    flat_theta = _flat_batch(fc.h, theta, z)
    y = float(np.atleast_1d(np.asarray(y, dtype=float))[0])
    dz = float(grid.spacing[0])
    step = fd_step if fd_step is not None else max(2.0 * dz, 1e-3)

    # boundary term: flat difference against the (1+n)-th x-derivative
    p_plus, _ = fc.transition_vector(t, mu, y + step, evaluator=ev)
    p_minus, _ = fc.transition_vector(t, mu, y - step, evaluator=ev)
    if n == 0:
        dx_p = (p_plus - p_minus) / (2.0 * step)
    else:
        p_mid, _ = fc.transition_vector(t, mu, y, evaluator=ev)
        dx_p = (p_plus - 2.0 * p_mid + p_minus) / step ** 2
    flat_y = float(_flat_batch(fc.h, theta, np.array([y]))[0])
    boundary = float(trapw @ ((flat_theta - flat_y) * dx_p))

    # lifted-density term: particle-lifted derivative of mu -> p(mu, t, T, x, z)
    pts, w = nodes_weights(mu)
    if lift_n is not None and pts.shape[0] > lift_n:
        idx = np.linspace(0, pts.shape[0] - 1, lift_n).round().astype(int)
        pts, w = pts[idx], w[idx] / w[idx].sum()
    cloud_pts = np.vstack([pts, [[y]]])
    n_cloud = cloud_pts.shape[0]

    def p_matrix(y_shift):
        shifted = cloud_pts.copy()
        shifted[-1, 0] += y_shift
        cloud = EmpiricalMeasure(shifted)
        ev_shift = fc._evaluator(t, cloud)
        rows = []
        for xx in pts[:, 0]:
            vec, _ = fc.transition_vector(t, cloud, xx, evaluator=ev_shift)
            rows.append(vec)
        return np.asarray(rows)

    p_pl = p_matrix(lift_delta)
    p_mi = p_matrix(-lift_delta)
    if n == 0:
        lifted = n_cloud * (p_pl - p_mi) / (2.0 * lift_delta)
    else:
        p_00 = p_matrix(0.0)
        lifted = n_cloud * (p_pl - 2.0 * p_00 + p_mi) / lift_delta ** 2
    flat_x = _flat_batch(fc.h, theta, pts[:, 0])
    inner = (flat_theta[None, :] - flat_x[:, None]) * lifted
    lifted_term = float(w @ (inner @ trapw))
    return boundary + lifted_term


def composed_flow_time_derivative(fc, t, mu, dt=None):
    """Time derivative of the composed map by central differences in t."""
    from .coefficients import nodes_weights

    grid = fc.pcfg.space_grid
    z = grid.nodes()[:, 0]
    trapw = grid.trapezoid_weights()
    theta, _ = fc.theta(t, mu)
    flat_theta = _flat_batch(fc.h, theta, z)
    step = dt if dt is not None else 1e-3 * max(fc.horizon_end - t, 1e-6)
    pts, w = nodes_weights(mu)
    total = 0.0
    ev_p = fc._evaluator(t + step, mu)
    ev_m = fc._evaluator(t - step, mu) if t - step > 0 else fc._evaluator(t, mu)
    lo = t - step if t - step > 0 else t
    for xx, wx in zip(pts[:, 0], w):
        p_plus, _ = fc.transition_vector(t + step, mu, xx, evaluator=ev_p)
        p_minus, _ = fc.transition_vector(lo, mu, xx, evaluator=ev_m)
        dt_p = (p_plus - p_minus) / (t + step - lo)
        flat_x = float(_flat_batch(fc.h, theta, np.array([xx]))[0])
        total += wx * float(trapw @ ((flat_theta - flat_x) * dt_p))
    return total


# ---------------------------------------------------------------------------
# named corpus functionals (registered for scenarios and tests)


def _sin_mean():
    def flat(mu, y):
        y = np.asarray(y, dtype=float)
        return np.sin(y[..., 0]) - mu.integrate(lambda p: np.sin(p[:, 0]))

    return MeasureFunctional(
        lambda mu: float(mu.integrate(lambda p: np.sin(p[:, 0]))),
        flat_derivative=flat, name="sin_mean")


def _second_moment():
    def flat(mu, y):
        y = np.asarray(y, dtype=float)
        return y[..., 0] ** 2 - mu.moment2()

    return MeasureFunctional(lambda mu: mu.moment2(), flat_derivative=flat,
                             name="second_moment")


def _mean_squared():
    def flat(mu, y):
        m = float(np.atleast_1d(mu.mean())[0])
        return 2.0 * m * (np.asarray(y, dtype=float)[..., 0] - m)

    return MeasureFunctional(
        lambda mu: float(np.atleast_1d(mu.mean())[0]) ** 2,
        flat_derivative=flat, name="mean_squared")


def _scalar_stat():
    # h(mu) = z + 0.5 sin z with z = int y dmu
    def value(mu):
        z = float(np.atleast_1d(mu.mean())[0])
        return z + 0.5 * np.sin(z)

    def flat(mu, y):
        z = float(np.atleast_1d(mu.mean())[0])
        return (1.0 + 0.5 * np.cos(z)) * (np.asarray(y, dtype=float)[..., 0] - z)

    return MeasureFunctional(value, flat_derivative=flat, name="scalar_stat")


FUNCTIONALS = {
    "sin_mean": _sin_mean,
    "second_moment": _second_moment,
    "mean_squared": _mean_squared,
    "scalar_stat": _scalar_stat,
}
