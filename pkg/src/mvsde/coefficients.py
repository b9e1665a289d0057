"""Coefficient models b, sigma, a and their measure derivatives.

A CoefficientModel evaluates drift, diffusion and a = sigma sigma^T at
(t, x, mu) with x either a single point (d,) or a batch (N, d).  Builders for
the four concrete interaction classes (first order, N order, scalar,
polynomial) derive the measure derivatives analytically where the structure
permits, stored in the normalized gauge: the flat derivative of any
coefficient integrates to zero against mu.

Interaction kernels passed to the builders must broadcast over leading axes:
``bbar(t, x, y)`` receives x with shape (..., d) and y with shape (..., d) and
returns (..., d); diffusion kernels return (..., d, q).
"""

import numpy as np

from .errors import DomainError, ResourceError, UsageError
from .measures import DensityGrid, EmpiricalMeasure, Mixture

_KERNEL_EVAL_BUDGET = 1_000_000


def nodes_weights(mu):
    """Quadrature nodes and weights of a measure in any representation."""
    if isinstance(mu, EmpiricalMeasure):
        return mu.points, mu.weights
    if isinstance(mu, DensityGrid):
        return mu.spec.nodes(), mu.spec.trapezoid_weights() * mu.values.ravel()
    if isinstance(mu, Mixture):
        parts = [nodes_weights(m) for _, m in mu.components]
        pts = np.concatenate([p for p, _ in parts], axis=0)
        w = np.concatenate([c * wi for (_, wi), (c, _) in zip(parts, mu.components)])
        return pts, w
    raise UsageError(f"unsupported measure type {type(mu).__name__}")


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape != (dim,):
            raise UsageError(f"point has shape {x.shape}, expected ({dim},)")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise UsageError(f"batch has shape {x.shape}, expected (N, {dim})")
    return x, False


class CoefficientModel:
    """Coefficients of a measure-dependent SDE with optional flat derivatives.

    Parameters
    ----------
    dim_x, dim_w : state and noise dimensions.
    b_fn, sigma_fn : callables (t, x, mu) -> arrays, batched over x.
    flat_db, flat_da, flat2_da : optional analytic flat derivatives, evaluated
        at a single (t, x, mu) with y batched: flat_db(t, x, mu, y) with y of
        shape (M, d) returns (M, d); flat_da returns (M, d, d); flat2_da takes
        (y, yp) both (M, d) and returns (M, d, d).
    """

    def __init__(self, dim_x, dim_w, b_fn, sigma_fn, flat_db=None, flat_da=None,
                 flat2_da=None, name="custom", interaction_cost="stats"):
        self.dim_x = int(dim_x)
        self.dim_w = int(dim_w)
        self._b_fn = b_fn
        self._sigma_fn = sigma_fn
        self.flat_db = flat_db
        self.flat_da = flat_da
        self.flat2_da = flat2_da
        self.name = name
        # "pairwise" models pay O(particles * support) per coefficient call
        # and may be evaluated against a thinned interaction measure
        self.interaction_cost = interaction_cost

    def eval_b(self, t, x, mu):
        xb, single = _as_batch(x, self.dim_x)
        out = np.asarray(self._b_fn(t, xb, mu), dtype=float)
        out = out.reshape(xb.shape[0], self.dim_x)
        return out[0] if single else out

    def eval_sigma(self, t, x, mu):
        xb, single = _as_batch(x, self.dim_x)
        out = np.asarray(self._sigma_fn(t, xb, mu), dtype=float)
        out = out.reshape(xb.shape[0], self.dim_x, self.dim_w)
        return out[0] if single else out

    def eval_a(self, t, x, mu):
        s = self.eval_sigma(t, x, mu)
        return np.einsum("...ij,...kj->...ik", s, s)

    def has_flat_derivatives(self):
        return self.flat_db is not None and self.flat_da is not None


def _integrate_kernel(kernel, t, x_batch, pts, w, extra_dims):
    """sum_m w_m kernel(t, x, y_m), chunked over the mu nodes."""
    n = x_batch.shape[0]
    m = pts.shape[0]
    out = None
    chunk = max(1, int(5e6) // max(n, 1))
    for start in range(0, m, chunk):
        p = pts[start:start + chunk]
        vals = np.asarray(kernel(t, x_batch[:, None, :], p[None, :, :]), dtype=float)
        vals = vals.reshape((n, p.shape[0]) + extra_dims)
        contrib = np.tensordot(vals, w[start:start + chunk], axes=(1, 0))
        out = contrib if out is None else out + contrib
    return out


# ---------------------------------------------------------------------------
# first order interaction


def make_first_order(bbar, sbar, dim_x=1, dim_w=1, name="first_order"):
    """Coefficients b = int bbar(t, x, y) mu(dy), sigma = int sbar(t, x, y) mu(dy).

    Flat derivatives are exact: the drift is linear in mu and a = S S^T is
    quadratic, so the product rule closes the algebra.
    """

    def b_fn(t, x, mu):
        pts, w = nodes_weights(mu)
        return _integrate_kernel(bbar, t, x, pts, w, (dim_x,))

    def sigma_fn(t, x, mu):
        pts, w = nodes_weights(mu)
        return _integrate_kernel(sbar, t, x, pts, w, (dim_x, dim_w))

    def flat_db(t, x, mu, y):
        yb, single = _as_batch(y, dim_x)
        xb = np.asarray(x, dtype=float)[None, :]
        vals = np.asarray(bbar(t, xb[:, None, :], yb[None, :, :]), dtype=float)
        vals = vals.reshape(yb.shape[0], dim_x)
        base = b_fn(t, xb, mu)[0]
        out = vals - base[None, :]
        return out[0] if single else out

    def _sigma_at(t, x, mu):
        return sigma_fn(t, np.asarray(x, dtype=float)[None, :], mu)[0]

    def _sbar_at(t, x, y_batch):
        xb = np.asarray(x, dtype=float)[None, :]
        vals = np.asarray(sbar(t, xb[:, None, :], y_batch[None, :, :]), dtype=float)
        return vals.reshape(y_batch.shape[0], dim_x, dim_w)

    def flat_da(t, x, mu, y):
        yb, single = _as_batch(y, dim_x)
        s = _sigma_at(t, x, mu)
        sb = _sbar_at(t, x, yb)
        a = s @ s.T
        out = (np.einsum("mij,kj->mik", sb, s)
               + np.einsum("ij,mkj->mik", s, sb)
               - 2.0 * a[None, :, :])
        return out[0] if single else out

    def flat2_da(t, x, mu, y, yp):
        yb, _ = _as_batch(y, dim_x)
        ypb, _ = _as_batch(yp, dim_x)
        s = _sigma_at(t, x, mu)
        u = _sbar_at(t, x, yb) - s[None, :, :]
        v = _sbar_at(t, x, ypb) - s[None, :, :]
        return (np.einsum("mij,mkj->mik", u, v)
                + np.einsum("mij,mkj->mik", v, u))

    return CoefficientModel(dim_x, dim_w, b_fn, sigma_fn, flat_db=flat_db,
                            flat_da=flat_da, flat2_da=flat2_da, name=name,
                            interaction_cost="pairwise")


# ---------------------------------------------------------------------------
# N order interaction


def make_n_order(order, bbar, sbar, dim_x=1, dim_w=1, name="n_order"):
    """Coefficients given by order-fold mu integrals of bbar(t, x, y_1..y_N).

    The kernels receive the interaction points as a list of ``order`` arrays.
    Tensor quadrature is capped at 10^6 kernel evaluations per call.
    """
    if order < 1:
        raise UsageError("interaction order must be >= 1")

    def _tensor_integral(kernel, t, x_batch, mu, extra_dims, fixed=None):
        pts, w = nodes_weights(mu)
        m = pts.shape[0]
        free = order - (0 if fixed is None else 1)
        n_eval = x_batch.shape[0] * m ** free
        if n_eval > _KERNEL_EVAL_BUDGET:
            raise ResourceError(
                f"n_order quadrature needs {n_eval} kernel evaluations "
                f"(budget {_KERNEL_EVAL_BUDGET})")
        idx = np.meshgrid(*([np.arange(m)] * free), indexing="ij") if free else []
        flat_idx = [ix.ravel() for ix in idx]
        combo_w = np.ones(m ** free if free else 1)
        for ix in flat_idx:
            combo_w = combo_w * w[ix]
        ys = []
        slot_iter = iter(range(len(flat_idx)))
        for slot in range(order):
            if fixed is not None and slot == fixed[0]:
                ys.append(np.broadcast_to(fixed[1], (combo_w.shape[0], dim_x)))
            else:
                ys.append(pts[flat_idx[next(slot_iter)]])
        xs = x_batch[:, None, :]
        args = [np.broadcast_to(yk[None, :, :], (x_batch.shape[0],) + yk.shape)
                for yk in ys]
        vals = np.asarray(kernel(t, xs, args), dtype=float)
        vals = vals.reshape((x_batch.shape[0], combo_w.shape[0]) + extra_dims)
        return np.tensordot(vals, combo_w, axes=(1, 0))

    def b_fn(t, x, mu):
        return _tensor_integral(bbar, t, x, mu, (dim_x,))

    def sigma_fn(t, x, mu):
        return _tensor_integral(sbar, t, x, mu, (dim_x, dim_w))

    def flat_db(t, x, mu, y):
        yb, single = _as_batch(y, dim_x)
        xb = np.asarray(x, dtype=float)[None, :]
        base = b_fn(t, xb, mu)[0]
        out = np.empty((yb.shape[0], dim_x))
        for r, yv in enumerate(yb):
            acc = -order * base
            for slot in range(order):
                acc = acc + _tensor_integral(bbar, t, xb, mu, (dim_x,),
                                             fixed=(slot, yv))[0]
            out[r] = acc
        return out[0] if single else out

    return CoefficientModel(dim_x, dim_w, b_fn, sigma_fn, flat_db=flat_db,
                            name=name, interaction_cost="pairwise")


# ---------------------------------------------------------------------------
# scalar interaction


def make_scalar(psis, phis, bouter, souter, dim_x=1, dim_w=1, fd_step=1e-6,
                name="scalar"):
    """Coefficients driven by scalar statistics of the measure.

    b(t, x, mu) = bouter(t, x, z) with z_k = int psis[k] d mu, and likewise
    sigma through phis/souter.  The statistic functions map (M, d) point
    arrays to (M,) values; the outer maps receive x batched and the statistic
    vector, returning (..., d) and (..., d, q).  Flat derivatives follow from
    the chain rule with central finite differences on the outer maps.
    """
    psis = list(psis)
    phis = list(phis)

    def _stats(fns, mu):
        pts, w = nodes_weights(mu)
        return np.array([w @ np.asarray(fn(pts), dtype=float) for fn in fns])

    def b_fn(t, x, mu):
        z = _stats(psis, mu)
        return np.asarray(bouter(t, x, z), dtype=float).reshape(x.shape[0], dim_x)

    def sigma_fn(t, x, mu):
        z = _stats(phis, mu)
        out = np.asarray(souter(t, x, z), dtype=float)
        return out.reshape(x.shape[0], dim_x, dim_w)

    def _outer_grad(outer, t, x, z, out_shape):
        grads = []
        for k in range(len(z)):
            h = fd_step * (1.0 + abs(z[k]))
            zp = z.copy()
            zm = z.copy()
            zp[k] += h
            zm[k] -= h
            up = np.asarray(outer(t, x, zp), dtype=float).reshape(out_shape)
            um = np.asarray(outer(t, x, zm), dtype=float).reshape(out_shape)
            grads.append((up - um) / (2.0 * h))
        return grads

    def flat_db(t, x, mu, y):
        yb, single = _as_batch(y, dim_x)
        xb = np.asarray(x, dtype=float)[None, :]
        z = _stats(psis, mu)
        grads = _outer_grad(bouter, t, xb, z, (1, dim_x))
        out = np.zeros((yb.shape[0], dim_x))
        for k, fn in enumerate(psis):
            dev = np.asarray(fn(yb), dtype=float) - z[k]
            out += dev[:, None] * grads[k][0][None, :]
        return out[0] if single else out

    def flat_da(t, x, mu, y):
        yb, single = _as_batch(y, dim_x)
        xb = np.asarray(x, dtype=float)[None, :]
        z = _stats(phis, mu)
        s = np.asarray(souter(t, xb, z), dtype=float).reshape(dim_x, dim_w)
        grads = _outer_grad(souter, t, xb, z, (1, dim_x, dim_w))
        out = np.zeros((yb.shape[0], dim_x, dim_x))
        for k, fn in enumerate(phis):
            ds = grads[k][0]
            da_k = ds @ s.T + s @ ds.T
            dev = np.asarray(fn(yb), dtype=float) - z[k]
            out += dev[:, None, None] * da_k[None, :, :]
        return out[0] if single else out

    def flat2_da(t, x, mu, y, yp):
        yb, _ = _as_batch(y, dim_x)
        ypb, _ = _as_batch(yp, dim_x)
        xb = np.asarray(x, dtype=float)[None, :]
        z = _stats(phis, mu)
        nk = len(phis)
        base = np.asarray(souter(t, xb, z), dtype=float).reshape(dim_x, dim_w)

        def a_of(zv):
            s = np.asarray(souter(t, xb, zv), dtype=float).reshape(dim_x, dim_w)
            return s @ s.T

        out = np.zeros((yb.shape[0], dim_x, dim_x))
        for k in range(nk):
            for l in range(nk):
                hk = fd_step * (1.0 + abs(z[k]))
                hl = fd_step * (1.0 + abs(z[l]))
                zpp = z.copy(); zpp[k] += hk; zpp[l] += hl
                zpm = z.copy(); zpm[k] += hk; zpm[l] -= hl
                zmp = z.copy(); zmp[k] -= hk; zmp[l] += hl
                zmm = z.copy(); zmm[k] -= hk; zmm[l] -= hl
                hess = (a_of(zpp) - a_of(zpm) - a_of(zmp) + a_of(zmm)) / (4 * hk * hl)
                dk = np.asarray(phis[k](yb), dtype=float) - z[k]
                dl = np.asarray(phis[l](ypb), dtype=float) - z[l]
                out += (dk * dl)[:, None, None] * hess[None, :, :]
        _ = base
        return out

    return CoefficientModel(dim_x, dim_w, b_fn, sigma_fn, flat_db=flat_db,
                            flat_da=flat_da, flat2_da=flat2_da, name=name)


# ---------------------------------------------------------------------------
# polynomials on the Wasserstein space (scalar state, scalar noise)


def make_polynomial(hbars_b, hbars_sigma, name="polynomial"):
    """Scalar coefficients given by products of mu integrals.

    b(t, x, mu) = prod_i int hbars_b[i](t, x, y) mu(dy), and likewise for
    sigma.  Kernels map (t, x, y) with broadcastable (..., 1) arrays to (...,)
    scalar values.  Flat derivatives come from the product rule.
    """
    hbars_b = list(hbars_b)
    hbars_sigma = list(hbars_sigma)

    def _factors(kers, t, x_batch, mu):
        pts, w = nodes_weights(mu)
        out = []
        for ker in kers:
            vals = np.asarray(ker(t, x_batch[:, None, :], pts[None, :, :]),
                              dtype=float).reshape(x_batch.shape[0], pts.shape[0])
            out.append(vals @ w)
        return out

    def b_fn(t, x, mu):
        fac = _factors(hbars_b, t, x, mu)
        return np.prod(fac, axis=0)[:, None]

    def sigma_fn(t, x, mu):
        fac = _factors(hbars_sigma, t, x, mu)
        return np.prod(fac, axis=0)[:, None, None]

    def _flat_product(kers, t, x, mu, yb):
        xb = np.asarray(x, dtype=float)[None, :]
        fac = [f[0] for f in _factors(kers, t, xb, mu)]
        out = np.zeros(yb.shape[0])
        for k, ker in enumerate(kers):
            rest = np.prod([fac[i] for i in range(len(kers)) if i != k])
            vals = np.asarray(ker(t, xb[:, None, :], yb[None, :, :]),
                              dtype=float).reshape(yb.shape[0])
            out += rest * (vals - fac[k])
        return out

    def flat_db(t, x, mu, y):
        yb, single = _as_batch(y, 1)
        out = _flat_product(hbars_b, t, x, mu, yb)[:, None]
        return out[0] if single else out

    def flat_da(t, x, mu, y):
        yb, single = _as_batch(y, 1)
        xb = np.asarray(x, dtype=float)[None, :]
        s = sigma_fn(t, xb, mu)[0, 0, 0]
        ds = _flat_product(hbars_sigma, t, x, mu, yb)
        out = (2.0 * s * ds)[:, None, None]
        return out[0] if single else out

    return CoefficientModel(1, 1, b_fn, sigma_fn, flat_db=flat_db,
                            flat_da=flat_da, name=name,
                            interaction_cost="pairwise")


BUILDERS = {
    "first_order": make_first_order,
    "n_order": make_n_order,
    "scalar": make_scalar,
    "polynomial": make_polynomial,
}


# ---------------------------------------------------------------------------
# assumption validators


class AssumptionReport:
    """Numeric estimates for the ellipticity / regularity assumptions."""

    def __init__(self, lambda_min, lambda_max, holder_eta_a, holder_eta_flat,
                 tv_lipschitz_b, passed):
        if lambda_min > lambda_max:
            raise DomainError("lambda_min exceeds lambda_max")
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max
        self.holder_eta_a = holder_eta_a
        self.holder_eta_flat = holder_eta_flat
        self.tv_lipschitz_b = tv_lipschitz_b
        self.passed = passed

    def as_dict(self):
        return {"lambda_min": self.lambda_min, "lambda_max": self.lambda_max,
                "holder_eta_a": self.holder_eta_a,
                "holder_eta_flat": self.holder_eta_flat,
                "tv_lipschitz_b": self.tv_lipschitz_b, "passed": self.passed}


def _holder_exponent(increments):
    """Least-squares slope of log|delta| vs log|h| over dyadic separations."""
    hs = np.array([h for h, d in increments if d > 1e-14])
    ds = np.array([d for _, d in increments if d > 1e-14])
    if len(hs) < 3:
        return 1.0  # flat map: any exponent works, report the Lipschitz one
    slope = np.polyfit(np.log(hs), np.log(ds), 1)[0]
    return float(np.clip(slope, 1e-6, 1.0))


def validate_assumptions(model, domain_samples, mu_corpus, perturb_lambda=0.25):
    """Estimate ellipticity bounds, Hoelder exponents and the TV-Lipschitz
    constant of the drift over sampled (t, x) points and a corpus of measures.
    """
    samples = list(domain_samples)
    corpus = list(mu_corpus)
    if not samples:
        raise UsageError("domain sampler produced no (t, x) points")
    if not corpus:
        raise UsageError("measure corpus is empty")

    lam_min, lam_max = np.inf, -np.inf
    for t, x in samples:
        for mu in corpus:
            a = model.eval_a(t, np.atleast_1d(np.asarray(x, dtype=float)), mu)
            eig = np.linalg.eigvalsh(a)
            lam_min = min(lam_min, eig.min())
            lam_max = max(lam_max, eig.max())

    incr_a = []
    for t, x in samples[: min(len(samples), 8)]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mu = corpus[0]
        for k in range(2, 11):
            h = 2.0 ** (-k)
            xp = x.copy()
            xp[0] += h
            da = model.eval_a(t, xp, mu) - model.eval_a(t, x, mu)
            incr_a.append((h, float(np.abs(da).max())))
    eta_a = _holder_exponent(incr_a)

    eta_flat = None
    if model.flat_da is not None:
        incr_f = []
        t, x = samples[0]
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mu = corpus[0]
        y0 = np.zeros(model.dim_x)
        for k in range(2, 11):
            h = 2.0 ** (-k)
            yp = y0.copy()
            yp[0] += h
            df = (np.asarray(model.flat_da(t, x, mu, yp))
                  - np.asarray(model.flat_da(t, x, mu, y0)))
            incr_f.append((h, float(np.abs(df).max())))
        eta_flat = _holder_exponent(incr_f)

    # TV-Lipschitz constant of b via convex perturbations toward point masses
    tv_const = 0.0
    probe_points = [np.zeros(model.dim_x), np.ones(model.dim_x),
                    -np.ones(model.dim_x)]
    for t, x in samples[: min(len(samples), 8)]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        for mu in corpus:
            b0 = model.eval_b(t, x, mu)
            for z in probe_points:
                nu = Mixture([(1.0 - perturb_lambda, mu),
                              (perturb_lambda, EmpiricalMeasure.dirac(z))])
                b1 = model.eval_b(t, x, nu)
                tv_const = max(tv_const,
                               float(np.linalg.norm(b1 - b0)) / perturb_lambda)

    passed = {
        "HE_elliptic": bool(lam_min > 0 and np.isfinite(lam_max)),
        "HR_holder_a": bool(0 < eta_a <= 1),
        "HR_tv_lipschitz_b": bool(np.isfinite(tv_const)),
        "HRplus_holder_flat": bool(eta_flat is None or 0 < eta_flat <= 1),
    }
    return AssumptionReport(float(lam_min), float(lam_max), eta_a, eta_flat,
                            tv_const, passed)
