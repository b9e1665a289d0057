"""The linear Cauchy problem on time x space x measures.

The solution operator is probabilistic: U(t, x, mu) integrates the terminal
condition against the transition density of the decoupled flow started at
(t, x) along the law flow started at (t, mu), minus the time-integrated source
along the same densities.  A Monte-Carlo route averages the same functional
over simulated decoupled paths.  The residual checker rebuilds every term of
the generator

    dU/dt + b . dU/dx + 1/2 a : d2U/dx2
         + int [ b(z) . dmuU(z) + 1/2 a(z) : dv dmuU(z) ] mu(dz)  =  f

with finite differences: time through flows re-solved at shifted start times,
space on the evaluation point, and the measure terms through the empirical
lifting of U over a particle rendering of mu.
"""

import numpy as np

from .coefficients import nodes_weights
from .errors import UsageError
from .measures import EmpiricalMeasure
from .parametrix import ParametrixEvaluator, ProxySpec
from .simulate import SimConfig, euler_decoupled

_GL_TIME_NODES = 24


class CauchyData:
    """Source f(t, x, mu), terminal h(x, mu) and declared growth constants.

    Both maps are batched over x: they receive (N, d) arrays and return (N,)
    values.  Optional flat derivatives follow the (mu, y-batch) convention.
    """

    def __init__(self, f, h, flat_df=None, flat_dh=None, growth_c=1.0,
                 alpha=0.0, q=1.0):
        self.f = f
        self.h = h
        self.flat_df = flat_df
        self.flat_dh = flat_dh
        self.growth_c = float(growth_c)
        self.alpha = float(alpha)
        self.q = float(q)

    def check_growth(self, horizon, samples, measures):
        """Verify the declared growth envelope on sampled (t, x) x measures."""
        for t, x in samples:
            xv = np.atleast_1d(np.asarray(x, dtype=float))
            for mu in measures:
                envelope = self.growth_c * np.exp(
                    self.alpha * float(xv @ xv) / horizon) \
                    * (1.0 + mu.moment2() ** self.q)
                val = abs(float(self.f(t, xv[None, :], mu)[0])) \
                    + abs(float(self.h(xv[None, :], mu)[0]))
                if val > envelope * (1.0 + 1e-9):
                    return False
        return True


class SolveConfig:
    """Method selection and numerical knobs for one U evaluation."""

    def __init__(self, method="parametrix_quadrature", pcfg=None,
                 time_nodes=_GL_TIME_NODES, sim=None, c_fit=2.0,
                 alpha_guard=True):
        if method not in ("parametrix_quadrature", "monte_carlo"):
            raise UsageError(f"unknown method {method!r}")
        if method == "parametrix_quadrature" and pcfg is None:
            raise UsageError("parametrix_quadrature needs a ParametrixConfig")
        if method == "monte_carlo" and sim is None:
            raise UsageError("monte_carlo needs a SimConfig")
        self.method = method
        self.pcfg = pcfg
        self.time_nodes = int(time_nodes)
        self.sim = sim
        self.c_fit = float(c_fit)
        self.alpha_guard = bool(alpha_guard)


class SolveResult:
    def __init__(self, value, error_estimate, method):
        self.value = float(value)
        self.error_estimate = float(error_estimate)
        self.method = method


def _gl_nodes(a, b, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def solve_U(model, data, fixed_flow, t, x, mu, cfg):
    """Evaluate the Cauchy solution at (t, x, mu) along a solved law flow.

    The flow must start at (t, mu) and reach the terminal time.  The guard
    refuses exponential growth rates alpha >= 1/(4 c_fit), mirroring the
    integrability threshold of the Gaussian envelope with the fitted c.
    """
    horizon_end = fixed_flow.t1
    if not fixed_flow.covers(t, horizon_end):
        raise UsageError("flow does not cover [t, T]")
    if cfg.alpha_guard and data.alpha >= 1.0 / (4.0 * cfg.c_fit):
        raise UsageError(
            f"growth rate alpha={data.alpha} at or above the admissible "
            f"threshold 1/(4 c_fit)={1.0 / (4.0 * cfg.c_fit):.4f}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if cfg.method == "monte_carlo":
        return _solve_monte_carlo(model, data, fixed_flow, t, x, cfg)
    return _solve_quadrature(model, data, fixed_flow, t, x, cfg)


def _solve_quadrature(model, data, fixed_flow, t, x, cfg):
    horizon_end = fixed_flow.t1
    ev = ParametrixEvaluator(ProxySpec(model, fixed_flow, t), cfg.pcfg)
    grid_nodes = cfg.pcfg.space_grid.nodes()
    trapw = cfg.pcfg.space_grid.trapezoid_weights()
    law_T = fixed_flow.state_at(horizon_end)
    dens_T = ev.density_series(horizon_end, float(x[0]))
    term_h = float((trapw * dens_T.values.ravel())
                   @ np.asarray(data.h(grid_nodes, law_T)))

    def source_profile(n_nodes):
        nodes, w = _gl_nodes(t, horizon_end, n_nodes)
        total = 0.0
        for s_mid, ws in zip(nodes, w):
            law_s = fixed_flow.state_at(s_mid)
            f_vals = np.asarray(data.f(s_mid, grid_nodes, law_s))
            if not np.any(f_vals):
                continue
            if s_mid - t < (3.0 * ev.dz) ** 2 / max(ev.cov_grid(t, horizon_end).min()
                                                    / (horizon_end - t), 1e-12):
                # transition kernel narrower than the grid: integrate f against
                # the Gaussian proxy by Gauss-Hermite instead
                cov_x = float(ev.cov_points(t, s_mid, np.atleast_1d(x))[0])
                z_nodes = x[0] + np.sqrt(2.0 * cov_x) * ev._gh_u
                f_gh = np.asarray(data.f(s_mid, z_nodes[:, None], law_s))
                total += ws * float(f_gh @ ev._gh_w)
            else:
                dens_s = ev.density_series(s_mid, float(x[0]))
                total += ws * float((trapw * dens_s.values.ravel()) @ f_vals)
        return total

    term_f = source_profile(cfg.time_nodes)
    term_f_coarse = source_profile(max(8, cfg.time_nodes // 2))
    err = abs(term_f - term_f_coarse)
    return SolveResult(term_h - term_f, err, "parametrix_quadrature")


def _solve_monte_carlo(model, data, fixed_flow, t, x, cfg):
    horizon_end = fixed_flow.t1
    sim = SimConfig(cfg.sim.n_particles, cfg.sim.dt, horizon_end - t,
                    cfg.sim.seed, interaction_cap=cfg.sim.interaction_cap,
                    tabulation_cells=cfg.sim.tabulation_cells)
    ens = euler_decoupled(model, fixed_flow, t, x, sim)
    law_T = fixed_flow.state_at(horizon_end)
    h_vals = np.asarray(data.h(ens.states[-1], law_T))
    f_acc = np.zeros(ens.n_particles)
    times = ens.times
    for k, tk in enumerate(times):
        law_k = fixed_flow.state_at(tk)
        f_vals = np.asarray(data.f(tk, ens.states[k], law_k))
        w = 0.0
        if k > 0:
            w += 0.5 * (times[k] - times[k - 1])
        if k < len(times) - 1:
            w += 0.5 * (times[k + 1] - times[k])
        f_acc += w * f_vals
    per_path = h_vals - f_acc
    value = float(np.mean(per_path))
    stderr = float(np.std(per_path, ddof=1) / np.sqrt(ens.n_particles))
    return SolveResult(value, stderr, "monte_carlo")


# ---------------------------------------------------------------------------
# generator


class TestFunction:
    """Smooth test function with all derivative callbacks supplied.

    dx(t, x, mu) -> (d,); dxx -> (d, d); dmu(t, x, mu, y-batch) -> (M, d);
    dv_dmu -> (M, d, d).  Any missing callback is a usage error when the
    generator is applied.
    """

    def __init__(self, value, dx=None, dxx=None, dmu=None, dv_dmu=None,
                 dt=None):
        self.value = value
        self.dx = dx
        self.dxx = dxx
        self.dmu = dmu
        self.dv_dmu = dv_dmu
        self.dt = dt


def generator_apply(model, fn, t, x, mu):
    """Apply the measure-coupled generator to a test function at (t, x, mu)."""
    for name in ("dx", "dxx", "dmu", "dv_dmu"):
        if getattr(fn, name) is None:
            raise UsageError(f"generator needs the {name} callback")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    b = model.eval_b(t, x, mu)
    a = model.eval_a(t, x, mu)
    local = float(b @ np.asarray(fn.dx(t, x, mu))) \
        + 0.5 * float(np.sum(a * np.asarray(fn.dxx(t, x, mu))))
    pts, w = nodes_weights(mu)
    b_pts = model.eval_b(t, pts, mu)
    a_pts = model.eval_a(t, pts, mu)
    dmu_vals = np.asarray(fn.dmu(t, x, mu, pts))
    dv_vals = np.asarray(fn.dv_dmu(t, x, mu, pts))
    integrand = np.einsum("mi,mi->m", b_pts, dmu_vals) \
        + 0.5 * np.einsum("mij,mij->m", a_pts, dv_vals)
    return local + float(w @ integrand)


# ---------------------------------------------------------------------------
# residual verification


class FdConfig:
    """Finite-difference and flow-resolution knobs for the residual check.

    ``flow_builder`` serves the value, spatial and lifted-measure evaluations;
    ``time_flow_builder`` (defaulting to the same) serves the time derivative.
    A stochastic builder is fine for the lifted terms (the shared seed cancels
    path noise between the perturbed evaluations) but the time derivative
    differences evaluations across a short window, where martingale noise does
    not cancel; give it a deterministic builder when the flow matters.
    """

    def __init__(self, dt_factor=1e-3, dx=1e-3, lifted_n=512, lifted_delta=None,
                 flow_builder=None, solve_cfg=None, time_flow_builder=None):
        if flow_builder is None or solve_cfg is None:
            raise UsageError("residual check needs flow_builder and solve_cfg")
        self.dt_factor = float(dt_factor)
        self.dx = float(dx)
        self.lifted_n = int(lifted_n)
        self.lifted_delta = lifted_delta
        self.flow_builder = flow_builder
        self.time_flow_builder = time_flow_builder or flow_builder
        self.solve_cfg = solve_cfg


class ResidualReport:
    def __init__(self, residuals, details):
        self.residuals = residuals
        self.details = details

    @property
    def max(self):
        return float(np.max(self.residuals))

    @property
    def median(self):
        return float(np.median(self.residuals))


def residual_check(model, data, horizon_end, sample_points, fd_cfg):
    """Assemble (dt + generator) U - f at sample (t, x, mu) points.

    Time derivatives re-solve the law flow at shifted start times; measure
    derivatives lift U over a uniform particle rendering of mu and
    differentiate particle coordinates with a shared flow seed.
    """
    residuals = []
    details = []
    for (t, x, mu) in sample_points:
        dt_step = fd_cfg.dt_factor * (horizon_end - t)
        if t >= horizon_end - 2.0 * dt_step:
            raise UsageError("sample point too close to the terminal time")
        x = np.atleast_1d(np.asarray(x, dtype=float))

        def u_of(tt, xx, m, builder=None):
            flow = (builder or fd_cfg.flow_builder)(model, tt, horizon_end, m)
            return solve_U(model, data, flow, tt, xx, m, fd_cfg.solve_cfg).value

        u_t = (u_of(t + dt_step, x, mu, fd_cfg.time_flow_builder)
               - u_of(t - dt_step, x, mu, fd_cfg.time_flow_builder)) \
            / (2.0 * dt_step)

        flow_0 = fd_cfg.flow_builder(model, t, horizon_end, mu)

        def u_at_x(xx):
            return solve_U(model, data, flow_0, t, np.atleast_1d(xx), mu,
                           fd_cfg.solve_cfg).value

        u_0 = u_at_x(x)
        dx = fd_cfg.dx
        grad = np.empty(len(x))
        hess = np.zeros((len(x), len(x)))
        for j in range(len(x)):
            e = np.zeros(len(x))
            e[j] = dx
            up, um = u_at_x(x + e), u_at_x(x - e)
            grad[j] = (up - um) / (2.0 * dx)
            hess[j, j] = (up - 2.0 * u_0 + um) / dx ** 2

        # measure terms by empirical lifting on a particle rendering of mu
        pts, w = nodes_weights(mu)
        n_lift = min(fd_cfg.lifted_n, pts.shape[0]) if pts.shape[0] > 1 \
            else fd_cfg.lifted_n
        cloud = _resample_uniform(mu, n_lift)
        dmu_vals = np.empty((cloud.n, len(x)))
        dv_vals = np.zeros((cloud.n, len(x), len(x)))
        u_cloud = u_of(t, x, cloud)
        for i in range(cloud.n):
            for j in range(len(x)):
                delta = fd_cfg.lifted_delta or 1e-3 * (1.0 + abs(cloud.points[i, j]))
                xp = cloud.points.copy()
                xm = cloud.points.copy()
                xp[i, j] += delta
                xm[i, j] -= delta
                up = u_of(t, x, EmpiricalMeasure(xp))
                um = u_of(t, x, EmpiricalMeasure(xm))
                dmu_vals[i, j] = cloud.n * (up - um) / (2.0 * delta)
                dv_vals[i, j, j] = cloud.n * (up - 2.0 * u_cloud + um) / delta ** 2

        b = model.eval_b(t, x, mu)
        a = model.eval_a(t, x, mu)
        b_pts = model.eval_b(t, cloud.points, mu)
        a_pts = model.eval_a(t, cloud.points, mu)
        gen = float(b @ grad) + 0.5 * float(np.sum(a * hess)) \
            + float(np.mean(np.einsum("mi,mi->m", b_pts, dmu_vals)
                            + 0.5 * np.einsum("mij,mij->m", a_pts, dv_vals)))
        f_val = float(np.asarray(data.f(t, x[None, :], mu))[0])
        res = abs(u_t + gen - f_val)
        residuals.append(res)
        details.append({"t": t, "x": x.tolist(), "residual": res,
                        "u": u_0, "u_t": u_t, "generator": gen, "f": f_val})
    return ResidualReport(np.asarray(residuals), details)


def constant_flow_builder(model, t, horizon_end, mu, nodes=9):
    """Frozen-measure flow: exact when coefficients ignore their law argument."""
    from .measures import MeasureFlow

    return MeasureFlow.constant(np.linspace(t, horizon_end, nodes), mu)


def picard_fp_flow_builder_factory(grid_cells=256, time_steps=16, tol=1e-4,
                                   max_iters=12):
    """Deterministic law flows from the grid fixed-point solver.

    The space grid is derived once on the first call and then frozen, so
    evaluations at nearby start times bin the initial measure identically and
    finite differences across them stay clean.
    """
    from .picard import PicardConfig, picard_solve

    frozen = {}

    def builder(model, t, horizon_end, mu):
        cfg = PicardConfig(horizon=horizon_end - t, time_steps=time_steps,
                           mu0=mu, tol=tol, max_iters=max_iters,
                           grid_cells=grid_cells, start_time=t,
                           space_grid=frozen.get("grid"))
        if "grid" not in frozen:
            frozen["grid"] = cfg.resolve_grid(model)
            cfg.space_grid = frozen["grid"]
        flow, _ = picard_solve(model, cfg)
        return flow

    return builder


def particle_flow_builder_factory(n_particles=512, dt=2e-3, seed=0, nodes=17):
    """Law flows from the interacting particle system with a shared seed.

    The shared seed makes U evaluations at perturbed measures differ smoothly,
    so finite differences through the flow stay clean.
    """
    from .measures import MeasureFlow
    from .simulate import euler_mv

    def builder(model, t, horizon_end, mu):
        cloud = _resample_uniform(mu, n_particles)
        cfg = SimConfig(n_particles, dt, horizon_end - t, seed=seed)
        ens = euler_mv(model, cloud, cfg)
        idx = np.linspace(0, len(ens.times) - 1, nodes).round().astype(int)
        idx = np.unique(idx)
        states = [EmpiricalMeasure(ens.states[i]) for i in idx]
        return MeasureFlow(t + ens.times[idx] - ens.times[0], states,
                           initial=mu)

    return builder


def _resample_uniform(mu, n):
    if isinstance(mu, EmpiricalMeasure) and mu.n == n and \
            np.allclose(mu.weights, 1.0 / n):
        return mu
    pts, w = nodes_weights(mu)
    cdf = np.cumsum(w)
    cdf = cdf / cdf[-1]
    q = (np.arange(n) + 0.5) / n
    idx = np.clip(np.searchsorted(cdf, q, side="left"), 0, pts.shape[0] - 1)
    return EmpiricalMeasure(pts[idx])


# ---------------------------------------------------------------------------
# chain rule and growth checks


def chain_rule_check(u_like, model_x, model_y, mu0_x, y0, horizon, mc_cfg):
    """Monte-Carlo both sides of the joint space-measure chain rule.

    In expectation the martingale part drops: E[U(T, Y_T, law(X_T))] minus
    U(0, Y_0, law(X_0)) must equal the time integral of the expected drift,
    Hessian and lifted-measure terms.  Returns (discrepancy, combined SE).
    """
    from .simulate import euler_mv

    ens_x = euler_mv(model_x, mu0_x, mc_cfg)
    y_cfg = SimConfig(mc_cfg.n_particles, mc_cfg.dt, mc_cfg.horizon,
                      seed=mc_cfg.seed + 101,
                      interaction_cap=mc_cfg.interaction_cap)
    ens_y = euler_mv(model_y, EmpiricalMeasure.dirac(y0), y_cfg)
    times = ens_x.times
    n = ens_x.n_particles

    mu_T = ens_x.terminal_measure()
    mu_0 = ens_x.measure_at(0)
    lhs_samples = np.asarray(u_like.value_batch(horizon, ens_y.states[-1], mu_T))
    lhs = float(np.mean(lhs_samples)) - float(
        u_like.value_batch(0.0, ens_y.states[0][:1], mu_0)[0])
    lhs_se = float(np.std(lhs_samples, ddof=1) / np.sqrt(n))

    rhs = 0.0
    rhs_sq = 0.0
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        t = times[k]
        mu_k = ens_x.measure_at(k)
        y_k = ens_y.states[k]
        eta = model_y.eval_b(t, y_k, ens_y.measure_at(k))
        gamma = model_y.eval_sigma(t, y_k, ens_y.measure_at(k))
        gg = np.einsum("nij,nkj->nik", gamma, gamma)
        term = np.asarray(u_like.dt_batch(t, y_k, mu_k))
        term = term + np.einsum("ni,ni->n", np.asarray(u_like.dx_batch(t, y_k, mu_k)), eta)
        term = term + 0.5 * np.einsum("nij,nij->n",
                                      np.asarray(u_like.dxx_batch(t, y_k, mu_k)), gg)
        # lifted-measure terms: independent copies are the X particles
        b_x = model_x.eval_b(t, ens_x.states[k], mu_k)
        a_x = model_x.eval_a(t, ens_x.states[k], mu_k)
        dmu = np.asarray(u_like.dmu_mean(t, y_k, mu_k, ens_x.states[k], b_x))
        dv = np.asarray(u_like.dv_dmu_mean(t, y_k, mu_k, ens_x.states[k], a_x))
        term = term + dmu + 0.5 * dv
        rhs += dt * float(np.mean(term))
        rhs_sq += (dt * float(np.std(term, ddof=1) / np.sqrt(n))) ** 2
    se = float(np.sqrt(lhs_se ** 2 + rhs_sq))
    return abs(lhs - rhs), se


class GrowthReport:
    def __init__(self, c_fit, per_band, passed):
        self.c_fit = c_fit
        self.per_band = per_band
        self.passed = passed


def growth_bound_check(u_evaluator, horizon, sample_points, k, q,
                       stability_factor=3.0):
    """Fit the minimal envelope constant and test stability across |x| bands.

    sample_points is a list of (t, x, mu); the fitted constant is the max of
    |U| over exp(k |x|^2 / T)(1 + M2(mu)^q), reported per |x| band.
    """
    ratios = []
    abs_x = []
    for (t, x, mu) in sample_points:
        xv = np.atleast_1d(np.asarray(x, dtype=float))
        env = np.exp(k * float(xv @ xv) / horizon) * (1.0 + mu.moment2() ** q)
        ratios.append(abs(u_evaluator(t, xv, mu)) / env)
        abs_x.append(float(np.linalg.norm(xv)))
    ratios = np.asarray(ratios)
    abs_x = np.asarray(abs_x)
    med = np.median(abs_x)
    low = ratios[abs_x <= med]
    high = ratios[abs_x > med]
    per_band = {"low": float(low.max()) if len(low) else 0.0,
                "high": float(high.max()) if len(high) else 0.0}
    c_fit = float(ratios.max())
    if per_band["low"] > 0 and per_band["high"] > 0:
        spread = max(per_band.values()) / min(per_band.values())
        passed = bool(np.isfinite(c_fit) and spread <= stability_factor)
    else:
        passed = bool(np.isfinite(c_fit))
    return GrowthReport(c_fit, per_band, passed)
