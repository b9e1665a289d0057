"""Fixed-point construction of the measure flow of the nonlinear SDE.

One application of the map sends a frozen candidate flow Q to the marginal
flow of the LINEAR SDE whose coefficients read their measure argument from Q.
Iterating from a constant initial guess contracts (for small horizons) in the
flow distance sup_t int |p - p'| dz, and the fixed point is the law flow of
the nonlinear dynamics.

Two backends compute the linear marginal flow: a conservative explicit
finite-difference Fokker-Planck scheme on a 1-d grid (upwind drift, centred
diffusion, CFL-limited substeps) and an i.i.d. particle scheme smoothed by a
kernel density estimate per time node.
"""

import numpy as np

from .errors import ConvergenceError, UsageError
from .measures import (
    DensityGrid,
    EmpiricalMeasure,
    GridSpec,
    MeasureFlow,
    default_grid,
    kde,
    l1_density_distance,
)
from .simulate import SimConfig, euler_decoupled, step_noise


class PicardConfig:
    """Horizon, discretization, backend and stopping rule for the iteration."""

    def __init__(self, horizon, time_steps, mu0, backend="fokker_planck_grid",
                 tol=1e-4, max_iters=25, nu=None, start_time=0.0,
                 space_grid=None, grid_cells=512, grid_pad=8.0,
                 fp_substeps=None, cfl_safety=0.4, n_particles=20_000,
                 seed=0, kde_bandwidth=None):
        if horizon <= 0 or time_steps < 2 or tol <= 0:
            raise UsageError("need horizon > 0, time_steps >= 2, tol > 0")
        if backend not in ("fokker_planck_grid", "particle"):
            raise UsageError(f"unknown backend {backend!r}")
        self.horizon = float(horizon)
        self.time_steps = int(time_steps)
        self.mu0 = mu0
        self.backend = backend
        self.tol = float(tol)
        self.max_iters = int(max_iters)
        self.nu = nu if nu is not None else mu0
        self.start_time = float(start_time)
        self.space_grid = space_grid
        self.grid_cells = int(grid_cells)
        self.grid_pad = float(grid_pad)
        self.fp_substeps = fp_substeps
        self.cfl_safety = float(cfl_safety)
        self.n_particles = int(n_particles)
        self.seed = int(seed)
        self.kde_bandwidth = kde_bandwidth

    def time_nodes(self):
        return self.start_time + np.linspace(0.0, self.horizon,
                                             self.time_steps + 1)

    def resolve_grid(self, model):
        if self.space_grid is not None:
            return self.space_grid
        center = np.atleast_1d(self.mu0.mean())
        spread = np.sqrt(max(self.mu0.moment2() - float(center @ center), 0.0))
        a0 = model.eval_a(self.start_time, center, self.mu0)
        diff_std = np.sqrt(np.linalg.eigvalsh(a0).max() * self.horizon)
        return default_grid(center, spread + diff_std + 0.1, self.grid_cells,
                            pad=self.grid_pad)


class PicardState:
    """Snapshot of one iterate: index, flow, distance and ratio history."""

    def __init__(self, iterate_index, flow, distance_to_previous,
                 contraction_ratios):
        if distance_to_previous < 0:
            raise UsageError("distances are nonnegative")
        self.iterate_index = iterate_index
        self.flow = flow
        self.distance_to_previous = distance_to_previous
        self.contraction_ratios = list(contraction_ratios)

    def as_dict(self):
        return {"iterate": self.iterate_index,
                "distance_to_previous": self.distance_to_previous,
                "contraction_ratios": self.contraction_ratios}


def measure_to_grid(mu, spec):
    """Render a measure on a grid: re-sampled values or mass-binned atoms."""
    if isinstance(mu, DensityGrid):
        if mu.spec.same_geometry(spec):
            return DensityGrid(spec, mu.values.copy(), normalize=True)
        if spec.dim != 1:
            raise UsageError("grid re-interpolation only supported in 1-d")
        vals = np.interp(spec.nodes()[:, 0], mu.spec.nodes()[:, 0],
                         mu.values.ravel(), left=0.0, right=0.0)
        return DensityGrid(spec, vals, normalize=True)
    if isinstance(mu, EmpiricalMeasure):
        if spec.dim != 1:
            raise UsageError("atom binning only supported in 1-d")
        x = spec.nodes()[:, 0]
        dx = spec.spacing[0]
        vals = np.zeros(len(x))
        idx = np.clip(np.round((mu.points[:, 0] - x[0]) / dx).astype(int),
                      0, len(x) - 1)
        np.add.at(vals, idx, mu.weights / dx)
        return DensityGrid(spec, vals, normalize=True)
    raise UsageError(f"cannot grid a {type(mu).__name__}")


def _fp_step_count(model, cfg, grid, times, q_flow):
    """Upper-bound CFL substep count over the horizon."""
    nodes = grid.nodes()
    worst_dt = np.inf
    dx = grid.spacing[0]
    for t in times[:-1]:
        mu_t = q_flow.state_at(t)
        a_vals = model.eval_a(t, nodes, mu_t)[:, 0, 0]
        b_vals = np.abs(model.eval_b(t, nodes, mu_t)[:, 0])
        dt_diff = dx ** 2 / max(a_vals.max(), 1e-12)
        dt_adv = dx / max(b_vals.max(), 1e-12)
        worst_dt = min(worst_dt, cfg.cfl_safety * min(dt_diff, dt_adv))
    return worst_dt


def picard_map(model, q_flow, cfg):
    """One application of the fixed-point map: marginal flow of the linear SDE
    with coefficients frozen along q_flow."""
    times = cfg.time_nodes()
    if not q_flow.covers(times[0], times[-1]):
        raise UsageError("candidate flow does not cover the horizon")
    if cfg.backend == "particle":
        return _picard_map_particle(model, q_flow, cfg, times)
    if model.dim_x != 1:
        raise UsageError("fokker_planck_grid backend is 1-d; use the particle "
                         "backend for d >= 2")
    grid = cfg.resolve_grid(model)
    x = grid.nodes()[:, 0]
    dx = grid.spacing[0]
    p = measure_to_grid(cfg.mu0, grid).values.ravel().copy()
    states = [DensityGrid(grid, p.copy())]
    for t0, t1 in zip(times[:-1], times[1:]):
        mu_t = q_flow.state_at(t0)
        b = model.eval_b(t0, grid.nodes(), mu_t)[:, 0]
        a = model.eval_a(t0, grid.nodes(), mu_t)[:, 0, 0]
        dt_cfl = cfg.cfl_safety * min(dx ** 2 / max(a.max(), 1e-12),
                                      dx / max(np.abs(b).max(), 1e-12))
        span = t1 - t0
        if cfg.fp_substeps is not None:
            n_sub = int(cfg.fp_substeps)
            if span / n_sub > dt_cfl:
                raise UsageError(
                    f"CFL violation: {n_sub} substeps give dt = {span / n_sub:.3e}"
                    f" but stability requires dt <= {dt_cfl:.3e}")
        else:
            n_sub = max(1, int(np.ceil(span / dt_cfl)))
        dt = span / n_sub
        b_half = 0.5 * (b[:-1] + b[1:])
        ap = a * 1.0
        for _ in range(n_sub):
            upwind = np.where(b_half > 0.0, p[:-1], p[1:])
            flux = b_half * upwind - (ap[1:] * p[1:] - ap[:-1] * p[:-1]) / (2.0 * dx)
            p[1:-1] -= dt / dx * (flux[1:] - flux[:-1])
            p[0] -= dt / dx * flux[0]
            p[-1] += dt / dx * flux[-1]
            np.clip(p, 0.0, None, out=p)
        states.append(DensityGrid(grid, p.copy()))
    return MeasureFlow(times, states, initial=cfg.mu0)


def _picard_map_particle(model, q_flow, cfg, times):
    grid = cfg.resolve_grid(model) if model.dim_x == 1 else None
    n = cfg.n_particles
    d = model.dim_x
    x = _sample_initial(cfg.mu0, n)
    states = []
    bandwidth = cfg.kde_bandwidth
    sub_dt = (times[1] - times[0]) / max(1, int(np.ceil((times[1] - times[0]) / 2e-3)))
    step = 0
    for j, t in enumerate(times):
        if grid is not None:
            states.append(kde(EmpiricalMeasure(x), grid, bandwidth=bandwidth))
        else:
            states.append(EmpiricalMeasure(x.copy()))
        if j == len(times) - 1:
            break
        t_next = times[j + 1]
        tau = t
        while tau < t_next - 1e-12:
            dt = min(sub_dt, t_next - tau)
            mu_t = q_flow.state_at(tau)
            if hasattr(mu_t, "to_empirical"):
                mu_t = mu_t.to_empirical(512)
            drift = model.eval_b(tau, x, mu_t)
            diff = model.eval_sigma(tau, x, mu_t)
            xi = step_noise(cfg.seed, step, n, model.dim_w)
            x = x + drift * dt + np.einsum("nij,nj->ni", diff, xi) * np.sqrt(dt)
            tau += dt
            step += 1
    return MeasureFlow(times, states, initial=cfg.mu0)


def _sample_initial(mu0, n):
    cdf = np.cumsum(mu0.weights)
    q = (np.arange(n) + 0.5) / n
    idx = np.clip(np.searchsorted(cdf, q, side="left"), 0, mu0.n - 1)
    return mu0.points[idx].astype(float).copy()


def flow_distance(p_flow, q_flow):
    """sup over shared time nodes of the L1 distance between the densities."""
    if len(p_flow) != len(q_flow) or \
            not np.allclose(p_flow.time_grid, q_flow.time_grid):
        raise UsageError("flows must share one time grid")
    dists = []
    for a, b in zip(p_flow.states, q_flow.states):
        if not (isinstance(a, DensityGrid) and isinstance(b, DensityGrid)):
            raise UsageError("flow_distance needs grid-backed flows")
        dists.append(l1_density_distance(a, b))
    return float(max(dists))


def picard_solve(model, cfg):
    """Iterate the map from the constant initial flow until the flow distance
    between successive iterates falls below tol.

    Returns the converged flow and the trajectory of PicardState snapshots.
    Non-convergence raises ConvergenceError carrying the state history.
    """
    times = cfg.time_nodes()
    grid = cfg.resolve_grid(model) if model.dim_x == 1 else None
    if grid is not None:
        nu_grid = measure_to_grid(cfg.nu, grid)
        current = MeasureFlow(times, [nu_grid] * len(times), initial=cfg.nu)
    else:
        current = MeasureFlow.constant(times, cfg.nu)
    history = []
    distances = []
    for m in range(1, cfg.max_iters + 1):
        new_flow = picard_map(model, current, cfg)
        d = flow_distance(new_flow, current)
        distances.append(d)
        ratios = [distances[i] / distances[i - 1]
                  for i in range(1, len(distances)) if distances[i - 1] > 0]
        history.append(PicardState(m, new_flow, d, ratios))
        current = new_flow
        if d < cfg.tol:
            return current, history
    raise ConvergenceError(
        f"no fixed point within {cfg.max_iters} iterations "
        f"(last distance {distances[-1]:.3e})", history=history)


def fitted_contraction_ratio(history, skip_first=1):
    """Geometric mean of the successive-distance ratios.

    The first ratio is skipped by default: the initial distance measures the
    arbitrary starting guess, not the contraction.
    """
    if history:
        ratios = history[-1].contraction_ratios[skip_first:]
        if ratios:
            return float(np.exp(np.mean(np.log(ratios))))
        if history[-1].contraction_ratios:
            return float(history[-1].contraction_ratios[-1])
    return float("nan")


def decoupled_flow_density(model, fixed_flow, s, x, t, parametrix_cfg):
    """Transition density of the decoupled SDE along a solved flow."""
    from .parametrix import ProxySpec, density_series

    spec = ProxySpec(model, fixed_flow, s)
    return density_series(spec, t, x, parametrix_cfg)
