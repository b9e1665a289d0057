"""Euler-Maruyama particle simulation of the interacting and decoupled SDEs.

The interacting system advances N particles against their own empirical
measure; the decoupled variant freezes the measure argument at a supplied
flow, giving i.i.d. paths.  Normal increments come from per-step Philox
streams keyed by (seed, step), so a run is reproducible from its seed alone
and permuting particles together with their noise rows permutes paths without
changing any ensemble statistic.
"""

import json

import numpy as np

from .errors import NumericError, UsageError
from .measures import EmpiricalMeasure


class SimConfig:
    """Particle count, step size, horizon and seed for one simulation.

    For 1-d models the per-step coefficient evaluation is tabulated on
    ``tabulation_cells`` points spanning the particle range and interpolated
    linearly; set it to 0 to evaluate the model at every particle exactly.
    """

    def __init__(self, n_particles, dt, horizon, seed, scheme="euler_maruyama",
                 interaction_cap=2048, tabulation_cells=1024):
        if n_particles < 2:
            raise UsageError("need at least two particles")
        if not 0.0 < dt <= horizon:
            raise UsageError("require 0 < dt <= horizon")
        if scheme != "euler_maruyama":
            raise UsageError(f"unknown scheme {scheme!r}")
        self.n_particles = int(n_particles)
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.scheme = scheme
        self.interaction_cap = int(interaction_cap)
        self.tabulation_cells = int(tabulation_cells)


class ParticleEnsemble:
    """Times plus per-time particle states, with seed provenance."""

    def __init__(self, times, states, seed):
        self.times = np.asarray(times, dtype=float)
        self.states = states
        self.seed = seed
        if states.shape[0] != len(self.times):
            raise UsageError("one state slice per time required")

    @property
    def n_particles(self):
        return self.states.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]

    def terminal_measure(self):
        return EmpiricalMeasure(self.states[-1])

    def measure_at(self, index):
        return EmpiricalMeasure(self.states[index])

    def to_binary(self, path_prefix):
        """Little-endian float64 frame plus a JSON sidecar."""
        data = np.ascontiguousarray(self.states, dtype="<f8")
        with open(f"{path_prefix}.bin", "wb") as fh:
            fh.write(data.tobytes())
        sidecar = {"shape": list(self.states.shape),
                   "times": self.times.tolist(), "seed": self.seed}
        with open(f"{path_prefix}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2)

    def to_csv(self, path, thin=100):
        flat = self.states[:, ::max(thin, 1), 0]
        np.savetxt(path, np.column_stack([self.times, flat]), delimiter=",")


def step_noise(seed, step, n, d):
    """Standard normal increments for one step from a (seed, step)-keyed stream."""
    gen = np.random.Generator(np.random.Philox(key=np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, step & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)))
    return gen.standard_normal((n, d))


def sorted_mean(values):
    """Mean via sorted summation: bitwise invariant under permutations."""
    v = np.sort(np.asarray(values, dtype=float), kind="stable")
    return float(np.sum(v) / len(v))


def sorted_variance(values):
    v = np.asarray(values, dtype=float)
    m = sorted_mean(v)
    return sorted_mean((v - m) ** 2) * len(v) / max(len(v) - 1, 1)


def _initial_states(mu0, n, d):
    """Deterministic rendering of the initial law as n particles.

    Uses the support directly when sizes match with uniform weights, otherwise
    systematic (stratified-quantile) resampling of the atoms.
    """
    if mu0.dim != d:
        raise UsageError("initial measure dimension mismatch")
    if mu0.n == n and np.allclose(mu0.weights, 1.0 / n):
        return mu0.points.copy()
    cdf = np.cumsum(mu0.weights)
    q = (np.arange(n) + 0.5) / n
    idx = np.searchsorted(cdf, q, side="left")
    idx = np.clip(idx, 0, mu0.n - 1)
    return mu0.points[idx].copy()


def _time_grid(cfg):
    n_steps = int(np.ceil(cfg.horizon / cfg.dt - 1e-12))
    times = np.minimum(cfg.dt * np.arange(n_steps + 1), cfg.horizon)
    times[-1] = cfg.horizon
    return times


def _thin_measure(mu, cap):
    if mu.n <= cap:
        return mu
    idx = np.linspace(0, mu.n - 1, cap).round().astype(int)
    w = mu.weights[idx]
    return EmpiricalMeasure(mu.points[idx], w / w.sum())


def _interaction_measure(states, model, cap):
    mu_hat = EmpiricalMeasure(states)
    if getattr(model, "interaction_cost", "stats") == "pairwise":
        return _thin_measure(mu_hat, cap)
    return mu_hat


def _eval_coeffs(model, t, x, mu, cells):
    """Drift and diffusion at all particles, tabulated+interpolated in 1-d."""
    n = x.shape[0]
    if model.dim_x != 1 or cells <= 0 or n <= cells:
        return model.eval_b(t, x, mu), model.eval_sigma(t, x, mu)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        b1 = model.eval_b(t, x[:1], mu)
        s1 = model.eval_sigma(t, x[:1], mu)
        return (np.broadcast_to(b1, (n, 1)),
                np.broadcast_to(s1, (n, 1, model.dim_w)))
    tab = np.linspace(lo, hi, cells)[:, None]
    b_tab = model.eval_b(t, tab, mu)[:, 0]
    s_tab = model.eval_sigma(t, tab, mu)[:, 0, :]
    drift = np.interp(x[:, 0], tab[:, 0], b_tab)[:, None]
    diff = np.stack([np.interp(x[:, 0], tab[:, 0], s_tab[:, j])
                     for j in range(model.dim_w)], axis=-1)[:, None, :]
    return drift, diff


def euler_mv(model, mu0, cfg):
    """Interacting Euler-Maruyama system driven by its empirical measure.

    Pairwise-interaction models see a deterministically thinned copy of the
    empirical measure once the particle count exceeds cfg.interaction_cap;
    statistic-driven (scalar) models always see the full cloud.
    """
    d = model.dim_x
    q = model.dim_w
    times = _time_grid(cfg)
    states = np.empty((len(times), cfg.n_particles, d))
    states[0] = _initial_states(mu0, cfg.n_particles, d)
    x = states[0].copy()
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        mu_hat = _interaction_measure(x, model, cfg.interaction_cap)
        drift, diff = _eval_coeffs(model, times[k], x, mu_hat,
                                   cfg.tabulation_cells)
        xi = step_noise(cfg.seed, k, cfg.n_particles, q)
        x = x + drift * dt + np.einsum("nij,nj->ni", diff, xi) * np.sqrt(dt)
        if not np.all(np.isfinite(x)):
            raise NumericError("particle state became non-finite", step=k + 1)
        states[k + 1] = x
    return ParticleEnsemble(times, states, cfg.seed)


def euler_decoupled(model, flow, s, x, cfg):
    """i.i.d. paths from x with coefficients frozen along the given flow."""
    if not flow.covers(s, s + cfg.horizon):
        raise UsageError("flow does not cover the simulation window")
    d = model.dim_x
    q = model.dim_w
    times = s + _time_grid(cfg)
    states = np.empty((len(times), cfg.n_particles, d))
    x0 = np.atleast_1d(np.asarray(x, dtype=float))
    states[0] = np.broadcast_to(x0, (cfg.n_particles, d))
    xk = states[0].copy()
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        mu_t = flow.state_at(times[k])
        if isinstance(mu_t, EmpiricalMeasure):
            mu_t = _thin_measure(mu_t, cfg.interaction_cap)
        elif hasattr(mu_t, "to_empirical"):
            mu_t = mu_t.to_empirical(cfg.interaction_cap)
        drift, diff = _eval_coeffs(model, times[k], xk, mu_t,
                                   cfg.tabulation_cells)
        xi = step_noise(cfg.seed, k, cfg.n_particles, q)
        xk = xk + drift * dt + np.einsum("nij,nj->ni", diff, xi) * np.sqrt(dt)
        if not np.all(np.isfinite(xk)):
            raise NumericError("particle state became non-finite", step=k + 1)
        states[k + 1] = xk
    return ParticleEnsemble(times, states, cfg.seed)


def chaos_convergence(model, mu0, ns, reference_terminal, cfg, n_repeats=1):
    """Terminal W2 error against a reference marginal for growing N.

    Returns one row per particle count with the median W2 over n_repeats
    seeds.  The reference may be an EmpiricalMeasure or a DensityGrid.
    """
    from .measures import wasserstein2

    if list(ns) != sorted(ns):
        raise UsageError("particle counts must be increasing")
    if hasattr(reference_terminal, "to_empirical"):
        reference = reference_terminal.to_empirical(4096)
    else:
        reference = reference_terminal
    rows = []
    for n in ns:
        vals = []
        for rep in range(n_repeats):
            sub = SimConfig(n, cfg.dt, cfg.horizon,
                            seed=cfg.seed + 7919 * rep,
                            interaction_cap=cfg.interaction_cap)
            ens = euler_mv(model, mu0, sub)
            vals.append(wasserstein2(ens.terminal_measure(), reference))
        rows.append({"n": int(n), "w2": float(np.median(vals))})
    return rows
