"""Transition densities of the decoupled flow by the parametrix series.

The density from (s, x) to time t is built as a truncated series: the order-0
term is the Gaussian proxy obtained by dropping the drift and freezing the
diffusion at the terminal point, and each further order convolves the previous
one in space-time with the correction kernel

    H(r, t, z, y) = [ -b(r, z) . h1 + 1/2 (a(r, z) - a(r, y)) : h2 ] phat

where h1, h2 are the Hermite factors of the proxy covariance int_r^t a(v, y)dv
evaluated at y - z, and all coefficients are read along a frozen measure flow.

Numerics: each space-time convolution integrates time with Gauss-Legendre
after the substitution v = t - u^2, which removes the (t - v)^(-1/2) endpoint
singularity exactly.  The z-integral switches between a trapezoid matvec on
the shared grid and a Gauss-Hermite rule centred on the proxy Gaussian when
the kernel is too narrow for the grid to resolve.  Series evaluation is 1-d;
the generic convolution operator and the proxy work in any dimension.
"""

import json
from collections import OrderedDict

import numpy as np

from . import kernels
from .errors import DomainError, ResourceError, UsageError
from .measures import DensityGrid, GridSpec
from .kernels import mittag_leffler, mittag_leffler_inverse

_GL_COV_NODES = 8


class ProxySpec:
    """Model plus the frozen measure flow entering the proxy construction."""

    def __init__(self, model, flow, s):
        if not flow.covers(s, s):
            raise UsageError("flow must start no later than s")
        self.model = model
        self.flow = flow
        self.s = float(s)


class ParametrixConfig:
    """Truncation order, quadrature sizes and grid for series evaluation."""

    def __init__(self, truncation, time_quad_nodes, space_grid, gauss_c=2.0,
                 renormalize=True, gh_nodes=32, cache_mb=512.0, flow_atoms=256):
        if not 0 <= truncation <= 6:
            raise UsageError("truncation order limited to 0..6 (cost guard)")
        if time_quad_nodes < 8:
            raise UsageError("need at least 8 time quadrature nodes")
        self.truncation = int(truncation)
        self.time_quad_nodes = int(time_quad_nodes)
        self.space_grid = space_grid
        self.gauss_c = float(gauss_c)
        self.renormalize = bool(renormalize)
        self.gh_nodes = int(gh_nodes)
        self.cache_mb = float(cache_mb)
        self.flow_atoms = int(flow_atoms)


class TransitionDensity:
    """Truncated-series density from (s, x) at time t on a grid in z."""

    def __init__(self, s, t, x, grid, terms, raw_mass, renormalized, provenance):
        self.s = s
        self.t = t
        self.x = x
        self.grid = grid
        self.terms = terms
        self.raw_mass = raw_mass
        self.renormalized = renormalized
        self.provenance = provenance

    @property
    def values(self):
        return self.grid.values

    def to_csv(self, path, provenance_path=None):
        self.grid.to_csv(path)
        if provenance_path is not None:
            with open(provenance_path, "w") as fh:
                json.dump(self.provenance, fh, indent=2)


def _gl_nodes(a, b, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def _sqrt_sub_nodes(r, t, n):
    """Nodes/weights for int_r^t f(v) dv with v = t - u^2 (singular end at t)."""
    u, w = _gl_nodes(0.0, np.sqrt(t - r), n)
    return t - u ** 2, 2.0 * u * w


class ParametrixEvaluator:
    """Caches covariance rows and kernel matrices for one (spec, cfg) pair.

    Reusable across evaluation points x: everything cached is x-independent.
    """

    def __init__(self, spec, cfg):
        if spec.model.dim_x != 1:
            raise UsageError("series evaluation is implemented for d = 1; "
                             "use proxy_density / spacetime_convolve beyond")
        self.spec = spec
        self.cfg = cfg
        self.grid = cfg.space_grid
        self.z = self.grid.nodes()[:, 0]
        self.trapw = self.grid.trapezoid_weights()
        self.dz = float(self.grid.spacing[0])
        g = len(self.z)
        per_matrix = 8.0 * g * g
        self._cache_cap = max(1, int(cfg.cache_mb * 1e6 / per_matrix))
        if per_matrix > cfg.cache_mb * 1e6:
            raise ResourceError("a single kernel matrix exceeds the cache budget")
        self._cov_cache = {}
        self._ker_cache = OrderedDict()
        u, w = np.polynomial.hermite.hermgauss(cfg.gh_nodes)
        self._gh_u = u
        self._gh_w = w / np.sqrt(np.pi)
        # flow states reduced to particle clouds once: coefficient calls are
        # then O(grid x atoms) instead of O(points x grid-cells) every time
        self._flow_states = [
            st.to_empirical(cfg.flow_atoms) if hasattr(st, "to_empirical") else st
            for st in spec.flow.states]
        self._flow_times = spec.flow.time_grid
        self._coef_cache = {}

    # -- coefficient access -------------------------------------------------

    def _flow_state(self, r):
        idx = int(np.clip(np.searchsorted(self._flow_times, r), 0,
                          len(self._flow_times) - 1))
        if idx > 0 and abs(self._flow_times[idx - 1] - r) <= \
                abs(self._flow_times[idx] - r):
            idx -= 1
        return self._flow_states[idx]

    def _coeffs_on_grid(self, r):
        """b and a tabulated on the shared grid at time r, cached."""
        key = round(r, 12)
        if key not in self._coef_cache:
            mu = self._flow_state(r)
            b = self.spec.model.eval_b(r, self.z[:, None], mu)[:, 0]
            a = self.spec.model.eval_a(r, self.z[:, None], mu)[:, 0, 0]
            self._coef_cache[key] = (b, a)
        return self._coef_cache[key]

    def _a_at(self, r, pts):
        # linear interpolation of the grid tabulation; clamped beyond the
        # grid, where only negligible Gaussian tail mass lives
        return np.interp(pts, self.z, self._coeffs_on_grid(r)[1])

    def _b_at(self, r, pts):
        return np.interp(pts, self.z, self._coeffs_on_grid(r)[0])

    def cov_points(self, t1, t2, pts):
        """Accumulated covariance int_t1^t2 a(r, y, flow(r)) dr, frozen at y."""
        nodes, w = _gl_nodes(t1, t2, _GL_COV_NODES)
        acc = np.zeros(pts.shape[0])
        for r, wr in zip(nodes, w):
            acc += wr * self._a_at(r, pts)
        if np.any(acc <= 0.0):
            raise DomainError("accumulated covariance not positive definite "
                              "(ellipticity violated along the flow)")
        return acc

    def cov_grid(self, t1, t2):
        key = (round(t1, 12), round(t2, 12))
        if key not in self._cov_cache:
            self._cov_cache[key] = self.cov_points(t1, t2, self.z)
        return self._cov_cache[key]

    # -- kernel -------------------------------------------------------------

    def _bracket(self, r, z, y, cov_y):
        """H without its Gaussian factor, broadcast over z/y/cov_y arrays."""
        shape = np.broadcast(z, y, cov_y).shape
        z_flat = np.broadcast_to(z, shape).ravel()
        y_flat = np.broadcast_to(y, shape).ravel()
        uniq_b = self._b_at(r, z_flat)
        uniq_az = self._a_at(r, z_flat)
        uniq_ay = self._a_at(r, y_flat)
        u = y_flat - z_flat
        c = np.broadcast_to(cov_y, shape).ravel()
        val = uniq_b * u / c + 0.5 * (uniq_az - uniq_ay) * (u * u / c ** 2 - 1.0 / c)
        return val.reshape(shape)

    def kernel_matrix(self, r, t):
        """H(r, t, z_i, y_j) tabulated on the shared grid, LRU-cached."""
        key = (round(r, 12), round(t, 12))
        if key in self._ker_cache:
            self._ker_cache.move_to_end(key)
            return self._ker_cache[key]
        cov_y = self.cov_grid(r, t)
        z = self.z[:, None]
        y = self.z[None, :]
        c = cov_y[None, :]
        u = y - z
        gauss = np.exp(-0.5 * u * u / c) / np.sqrt(2.0 * np.pi * c)
        b_z = self._b_at(r, self.z)[:, None]
        a_z = self._a_at(r, self.z)
        mat = (b_z * u / c
               + 0.5 * (a_z[:, None] - a_z[None, :]) * (u * u / c ** 2 - 1.0 / c)
               ) * gauss
        self._ker_cache[key] = mat
        if len(self._ker_cache) > self._cache_cap:
            self._ker_cache.popitem(last=False)
        return mat

    # -- series terms -------------------------------------------------------

    def proxy_vector(self, t1, t2, x):
        """Order-0 term: proxy density from x on the grid (frozen at z)."""
        cov = self.cov_grid(t1, t2)
        u = self.z - x
        return np.exp(-0.5 * u * u / cov) / np.sqrt(2.0 * np.pi * cov)

    def _nodes_at_depth(self, depth):
        # deeper convolutions act on geometrically smaller terms; halve the
        # node count per level, floored at 8
        return max(8, self.cfg.time_quad_nodes >> depth)

    def _term1(self, t_end, x, depth=0):
        """Order-1 term by the product-Gaussian Gauss-Hermite rule.

        Writes phat(s, v, x, z) H(v, t, z, y) as (Gaussian in z) x (smooth
        bracket) and integrates z exactly against the product Gaussian; this
        stays accurate when either Gaussian is far narrower than the grid.
        """
        s = self.spec.s
        nodes, weights = _sqrt_sub_nodes(s, t_end, self._nodes_at_depth(depth))
        out = np.zeros(len(self.z))
        x_arr = np.array([x])
        for v, wv in zip(nodes, weights):
            if v <= s or v >= t_end:
                continue
            cov_y = self.cov_grid(v, t_end)
            cov_x = float(self.cov_points(s, v, x_arr)[0])
            v_star = 1.0 / (1.0 / cov_x + 1.0 / cov_y)
            m_star = v_star * (x / cov_x + self.z / cov_y)
            z_nodes = m_star[:, None] + np.sqrt(2.0 * v_star)[:, None] * self._gh_u[None, :]
            cov_z = self.cov_points(s, v, z_nodes.ravel()).reshape(z_nodes.shape)
            # integrand over GH weight, assembled in log space: the proxy is
            # frozen at z, so its covariance drifts away from the product
            # Gaussian used to place the nodes and direct ratios can overflow
            log_w = (-0.5 * (z_nodes - x) ** 2 / cov_z
                     - 0.5 * (self.z[:, None] - z_nodes) ** 2 / cov_y[:, None]
                     + self._gh_u[None, :] ** 2
                     + 0.5 * np.log(v_star[:, None] / (cov_z * cov_y[:, None]))
                     - 0.5 * np.log(2.0 * np.pi))
            bracket = self._bracket(v, z_nodes, self.z[:, None], cov_y[:, None])
            out += wv * ((np.exp(np.minimum(log_w, 700.0)) * bracket) @ self._gh_w)
        return out

    def _term_higher(self, k, t_end, x, depth=0):
        """Order-k (k >= 2) term: previous term on the grid convolved with H."""
        s = self.spec.s
        nodes, weights = _sqrt_sub_nodes(s, t_end, self._nodes_at_depth(depth))
        out = np.zeros(len(self.z))
        for v, wv in zip(nodes, weights):
            if v <= s or v >= t_end:
                continue
            q = self.term_vector(k - 1, v, x, depth + 1)
            cov_y = self.cov_grid(v, t_end)
            if np.sqrt(cov_y.min()) < 3.0 * self.dz:
                # kernel too narrow for the grid: Gauss-Hermite around each y
                # with the exact per-y proxy covariance
                z_nodes = self.z[:, None] + np.sqrt(2.0 * cov_y)[:, None] * self._gh_u[None, :]
                q_vals = np.interp(z_nodes.ravel(), self.z, q,
                                   left=0.0, right=0.0).reshape(z_nodes.shape)
                bracket = self._bracket(v, z_nodes, self.z[:, None], cov_y[:, None])
                out += wv * ((q_vals * bracket) @ self._gh_w)
            else:
                mat = self.kernel_matrix(v, t_end)
                out += wv * ((q * self.trapw) @ mat)
        return out

    def term_vector(self, k, t_end, x, depth=0):
        if k == 0:
            return self.proxy_vector(self.spec.s, t_end, x)
        if k == 1:
            return self._term1(t_end, x, depth)
        return self._term_higher(k, t_end, x, depth)

    # -- public products ------------------------------------------------

    def density_series(self, t, x):
        s = self.spec.s
        if t <= s:
            raise UsageError("requires t > s")
        if not self.spec.flow.covers(s, t):
            raise UsageError("flow does not cover [s, t]")
        terms = [self.term_vector(0, t, x)]
        for k in range(1, self.cfg.truncation + 1):
            tk = self.term_vector(k, t, x)
            terms.append(tk)
            if not np.any(tk):
                # constant-coefficient degeneration: the correction kernel
                # vanishes identically, so do all higher orders
                mid = self.kernel_matrix(0.5 * (s + t), t)
                if not np.any(mid):
                    terms.extend(np.zeros(len(self.z))
                                 for _ in range(k + 1, self.cfg.truncation + 1))
                    break
        total = np.sum(terms, axis=0)
        raw_mass = float(self.trapw @ total)
        clipped = np.clip(total, 0.0, None)
        clip_mass = float(self.trapw @ (clipped - total))
        grid = DensityGrid(self.grid, clipped)
        if self.cfg.renormalize:
            grid.normalize()
        provenance = {"model": self.spec.model.name, "truncation": self.cfg.truncation,
                      "time_quad_nodes": self.cfg.time_quad_nodes,
                      "gh_nodes": self.cfg.gh_nodes, "s": s, "t": t, "x": x,
                      "raw_mass": raw_mass, "clip_mass": clip_mass,
                      "flow_nodes": len(self.spec.flow),
                      "renormalized": self.cfg.renormalize}
        return TransitionDensity(s, t, x, grid, terms, raw_mass,
                                 self.cfg.renormalize, provenance)

    def density_of_law(self, t, mu):
        from .coefficients import nodes_weights

        pts, w = nodes_weights(mu)
        if pts.shape[1] != 1:
            raise UsageError("density_of_law is 1-d like the series")
        total = np.zeros(len(self.z))
        for x, wx in zip(pts[:, 0], w):
            if wx == 0.0:
                continue
            saved = self.cfg.renormalize
            self.cfg.renormalize = False
            dens = self.density_series(t, float(x))
            self.cfg.renormalize = saved
            total += wx * np.sum(dens.terms, axis=0)
        grid = DensityGrid(self.grid, np.clip(total, 0.0, None))
        if self.cfg.renormalize:
            grid.normalize()
        return grid


# ---------------------------------------------------------------------------
# operation-level wrappers


def proxy_density(spec, t1, t2, x, freeze_y, z):
    """Proxy transition value: Gaussian with covariance int_t1^t2 a(r, y) dr."""
    if not (spec.s <= t1 < t2):
        raise UsageError("need s <= t1 < t2")
    d = spec.model.dim_x
    y = np.atleast_1d(np.asarray(freeze_y, dtype=float))
    nodes, w = _gl_nodes(t1, t2, _GL_COV_NODES)
    cov = np.zeros((d, d))
    for r, wr in zip(nodes, w):
        cov += wr * spec.model.eval_a(r, y, spec.flow.state_at(r))
    diff = np.atleast_1d(np.asarray(z, dtype=float)) - np.atleast_1d(
        np.asarray(x, dtype=float))
    return kernels.gauss_eval(cov, diff)


def parametrix_kernel(spec, r, t, x, y):
    """Pointwise correction kernel H(r, t, x, y) in any dimension."""
    if not (spec.s <= r < t):
        raise UsageError("need s <= r < t")
    model = spec.model
    mu_r = spec.flow.state_at(r)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    b = model.eval_b(r, x, mu_r)
    a_x = model.eval_a(r, x, mu_r)
    a_y = model.eval_a(r, y, mu_r)
    nodes, w = _gl_nodes(r, t, _GL_COV_NODES)
    cov = np.zeros((model.dim_x, model.dim_x))
    for v, wv in zip(nodes, w):
        cov += wv * model.eval_a(v, y, spec.flow.state_at(v))
    u = y - x
    g = kernels.gauss_eval(cov, u)
    h1 = kernels.hermite1(cov, u)
    h2 = kernels.hermite2(cov, u)
    return float((-(b @ h1) + 0.5 * np.sum((a_x - a_y) * h2)) * g)


def spacetime_convolve(f, g, spec, r, t, x, y, cfg):
    """Generic space-time convolution int_r^t int f(.,r,v,x,z) g(.,v,t,z,y) dz dv.

    ``f`` and ``g`` are callables (spec, t_from, t_to, point_from, z_batch) ->
    values over the z batch.  Time is integrated on two Gauss-Legendre panels
    with square-root substitutions at both endpoints, so integrable endpoint
    singularities up to (.)^(-1/2) are handled exactly.
    """
    nodes_grid = cfg.space_grid.nodes()
    trapw = cfg.space_grid.trapezoid_weights()
    n = cfg.time_quad_nodes
    if n * nodes_grid.shape[0] > 5e7:
        raise ResourceError("space-time convolution budget exceeded")
    mid = 0.5 * (r + t)
    total = 0.0
    # left panel: v = r + u^2; right panel: v = t - u^2
    for panel in ("left", "right"):
        if panel == "left":
            u, w = _gl_nodes(0.0, np.sqrt(mid - r), n)
            vs, ws = r + u ** 2, 2.0 * u * w
        else:
            u, w = _gl_nodes(0.0, np.sqrt(t - mid), n)
            vs, ws = t - u ** 2, 2.0 * u * w
        for v, wv in zip(vs, ws):
            if v <= r or v >= t:
                continue
            fv = np.asarray(f(spec, r, v, x, nodes_grid))
            gv = np.asarray(g(spec, v, t, nodes_grid, y))
            total += wv * float(trapw @ (fv * gv))
    return total


def density_series(spec, t, x, cfg):
    """Truncated parametrix series density from (spec.s, x) at time t."""
    return ParametrixEvaluator(spec, cfg).density_series(t, float(x))


def density_of_law(spec, t, cfg, mu):
    """Density of the law at time t: the series integrated over mu in x."""
    return ParametrixEvaluator(spec, cfg).density_of_law(t, mu)


# ---------------------------------------------------------------------------
# verification reports


class GaussianBoundReport:
    def __init__(self, passed, c_star, bound_value, c_hat, sups, notes=""):
        self.passed = passed
        self.c_star = c_star
        self.bound_value = bound_value
        self.c_hat = c_hat
        self.sups = sups
        self.notes = notes

    def as_dict(self):
        return {"passed": self.passed, "c_star": self.c_star,
                "bound_value": self.bound_value, "c_hat": self.c_hat,
                "sups": {str(c): {str(tau): v for tau, v in row.items()}
                         for c, row in self.sups.items()},
                "notes": self.notes}


def _windowed_sup_ratio(density, c):
    tau = density.t - density.s
    z = density.grid.spec.nodes()[:, 0]
    u = z - density.x
    g = np.exp(-0.5 * u * u / (c * tau)) / np.sqrt(2.0 * np.pi * c * tau)
    window = g >= 1e-12 * g.max()
    total = np.sum(density.terms, axis=0)
    return float(np.max(np.abs(total[window]) / g[window]))


def verify_gaussian_bound(densities, c_grid, eta=1.0, b_sup=0.0,
                          stability_ratio=2.0):
    """Check the Gaussian envelope of raw series densities over a c grid.

    For each candidate c the sampled sup of p/g(c (t-s), z - x) is recorded per
    density; the report keeps the smallest c whose sups are finite and stable
    (max/min per tau-decade ratio below stability_ratio) and backs out the
    effective bound constant through the Mittag-Leffler profile.
    """
    if not isinstance(densities, (list, tuple)):
        densities = [densities]
    for dens in densities:
        if dens.renormalized:
            raise UsageError("gaussian-bound checks need raw (unrenormalized) "
                             "densities")
    sups = {}
    c_star = None
    for c in c_grid:
        row = {}
        for dens in densities:
            row[float(dens.t - dens.s)] = _windowed_sup_ratio(dens, c)
        sups[float(c)] = row
        vals = np.array(list(row.values()))
        taus = np.array(list(row.keys()))
        if not np.all(np.isfinite(vals)):
            continue
        if len(vals) > 1:
            decades = np.floor(np.log10(taus))
            per_decade = [vals[decades == dcd].max() for dcd in np.unique(decades)]
            stable = max(per_decade) / max(min(per_decade), 1e-300) <= stability_ratio
        else:
            stable = True
        if stable and c_star is None:
            c_star = float(c)
    if c_star is None:
        return GaussianBoundReport(False, None, None, None, sups,
                                   "no candidate c gave finite, stable sups")
    bound_value = max(sups[c_star].values())
    floor = mittag_leffler(eta / 2.0, 1.0, 0.0)
    c_hat = mittag_leffler_inverse(eta / 2.0, 1.0, max(bound_value, floor)) \
        / (b_sup + 1.0)
    return GaussianBoundReport(True, c_star, float(bound_value), float(c_hat),
                               sups)


class DerivativeScalingReport:
    def __init__(self, order, slope, target, band, passed, sups):
        self.order = order
        self.slope = slope
        self.target = target
        self.band = band
        self.passed = passed
        self.sups = sups

    def as_dict(self):
        return {"order": self.order, "slope": self.slope, "target": self.target,
                "band": self.band, "passed": self.passed,
                "sups": {str(k): v for k, v in self.sups.items()}}


def verify_derivative_scaling(spec, cfg, n, t_offsets, x0=0.0, c=None,
                              band=0.15):
    """Fit the time-scaling exponent of sup_z |d^n/dx^n p| / g(c (t-s), .).

    Central differences in the starting point x feed the fit of
    log sup vs log (t-s); the pass band is slope >= -n/2 - band (and a
    two-sided band for n = 0).
    """
    if n not in (0, 1, 2):
        raise UsageError("derivative order must be 0, 1 or 2")
    c = cfg.gauss_c if c is None else c
    ev = ParametrixEvaluator(spec, cfg)
    sups = {}
    for tau in t_offsets:
        t = spec.s + tau
        delta = max(0.05 * np.sqrt(tau), 2.0 * ev.dz)
        saved = cfg.renormalize
        cfg.renormalize = False
        vals = {dx: np.sum(ev.density_series(t, x0 + dx).terms, axis=0)
                for dx in ((-delta, 0.0, delta) if n else (0.0,))}
        cfg.renormalize = saved
        if n == 0:
            dp = vals[0.0]
        elif n == 1:
            dp = (vals[delta] - vals[-delta]) / (2.0 * delta)
        else:
            dp = (vals[delta] - 2.0 * vals[0.0] + vals[-delta]) / delta ** 2
        u = ev.z - x0
        g = np.exp(-0.5 * u * u / (c * tau)) / np.sqrt(2.0 * np.pi * c * tau)
        window = g >= 1e-12 * g.max()
        sups[float(tau)] = float(np.max(np.abs(dp[window]) / g[window]))
    taus = np.array(sorted(sups))
    slope = float(np.polyfit(np.log(taus), np.log([sups[t] for t in taus]), 1)[0])
    target = -n / 2.0
    if n == 0:
        passed = abs(slope - target) <= band
    else:
        passed = slope >= target - band
    return DerivativeScalingReport(n, slope, target, band, passed, sups)
