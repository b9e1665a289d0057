"""Gaussian kernel algebra and special functions used throughout the toolkit.

Conventions: for a positive definite covariance S the centred Gaussian density
is ``gauss_eval(S, x) = (2*pi)**(-d/2) * det(S)**(-1/2) * exp(-<S^-1 x, x>/2)``.
The first and second Hermite factors are

    hermite1(S, x) = -S^-1 x
    hermite2(S, x) = (S^-1 x)(S^-1 x)^T - S^-1

so that ``d/dx_i g = hermite1_i * g`` and ``d2/dx_i dx_j g = hermite2_ij * g``.

All functions are pure; there is no caching.
"""

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, RangeError

_SYM_RTOL = 1e-12


def as_covariance(sigma):
    """Validate and return a covariance matrix as a (d, d) float array.

    Accepts a scalar (d=1), a length-1 vector or a square matrix.  Symmetry is
    required to relative tolerance 1e-12; positive definiteness is defined
    operationally by the success of the Cholesky factorization.
    """
    arr = np.atleast_2d(np.asarray(sigma, dtype=float))
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DomainError(f"covariance must be square, got shape {arr.shape}")
    scale = max(np.abs(arr).max(), 1.0)
    if np.abs(arr - arr.T).max() > _SYM_RTOL * scale:
        raise DomainError("covariance is not symmetric within 1e-12 relative tolerance")
    return arr


def _cholesky(sigma):
    arr = as_covariance(sigma)
    try:
        chol = np.linalg.cholesky(arr)
    except np.linalg.LinAlgError:
        raise DomainError("covariance is not positive definite") from None
    return arr, chol


def gauss_eval(sigma, x):
    """Gaussian density with covariance ``sigma`` evaluated at ``x``."""
    _, chol = _cholesky(sigma)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = chol.shape[0]
    if x.shape != (d,):
        raise DomainError(f"point has shape {x.shape}, expected ({d},)")
    # solve L u = x, then <S^-1 x, x> = |u|^2 and det(S)^(1/2) = prod(diag(L))
    u = np.linalg.solve(chol, x)
    log_det_half = np.log(np.diag(chol)).sum()
    log_val = -0.5 * d * np.log(2.0 * np.pi) - log_det_half - 0.5 * (u @ u)
    return float(np.exp(log_val))


def gauss_eval_iso(c, x):
    """Isotropic shorthand ``gauss_eval(c * I, x)`` for scalar variance c > 0."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if c <= 0.0:
        raise DomainError("isotropic variance must be positive")
    d = x.shape[-1]
    return (2.0 * np.pi * c) ** (-0.5 * d) * np.exp(-0.5 * np.sum(x * x, axis=-1) / c)


def hermite1(sigma, x):
    """First Hermite factor: ``-sigma^-1 x``."""
    arr, chol = _cholesky(sigma)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (arr.shape[0],):
        raise DomainError(f"point has shape {x.shape}, expected ({arr.shape[0]},)")
    u = np.linalg.solve(chol, x)
    return -np.linalg.solve(chol.T, u)


def hermite2(sigma, x):
    """Second Hermite factor: ``(sigma^-1 x)(sigma^-1 x)^T - sigma^-1``."""
    arr, chol = _cholesky(sigma)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (arr.shape[0],):
        raise DomainError(f"point has shape {x.shape}, expected ({arr.shape[0]},)")
    inv = np.linalg.inv(arr)
    v = inv @ x
    return np.outer(v, v) - inv


_ML_MAX_TERMS = 500
_ML_RTOL = 1e-15


def mittag_leffler(alpha, beta, z):
    """Two-parameter Mittag-Leffler function ``sum_n z^n / Gamma(alpha n + beta)``.

    Summed term by term until the current term falls below 1e-15 of the partial
    sum, or 500 terms.  Raises RangeError if the sum leaves the representable
    range before converging.
    """
    if alpha <= 0.0 or beta <= 0.0:
        raise DomainError("mittag_leffler requires alpha > 0 and beta > 0")
    z = float(z)
    total = 0.0
    for n in range(_ML_MAX_TERMS):
        log_gamma = gammaln(alpha * n + beta)
        if z == 0.0:
            term = 1.0 / np.exp(log_gamma) if n == 0 else 0.0
        else:
            log_mag = n * np.log(abs(z)) - log_gamma
            if log_mag > 700.0:
                raise RangeError("mittag_leffler overflow: z too large for float range")
            term = np.sign(z) ** n * np.exp(log_mag)
        total += term
        if not np.isfinite(total):
            raise RangeError("mittag_leffler overflow during summation")
        if abs(term) < _ML_RTOL * max(abs(total), 1.0):
            return float(total)
    return float(total)


def mittag_leffler_inverse(alpha, beta, target, z_hi=100.0):
    """Solve ``mittag_leffler(alpha, beta, z) = target`` for z >= 0 by bisection.

    Used to back out an effective constant from an observed bound value.
    """
    if target < mittag_leffler(alpha, beta, 0.0):
        raise DomainError("target below E(0); no nonnegative solution")
    lo, hi = 0.0, 1.0
    while mittag_leffler(alpha, beta, hi) < target:
        hi *= 2.0
        if hi > z_hi:
            return float(z_hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mittag_leffler(alpha, beta, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def spacetime_sup(p, c, ts, xs, c_ratio=2.0):
    """Sampled sup of ``|x|^p g(c t, x) / (t^(p/2) g(c_ratio * c * t, x))``.

    Returns a dict mapping each t to the sup over the sampled x.  Finiteness
    and stability of these sups across t-decades is the checkable content of
    the space-time inequality.  Evaluated in log space so Gaussian tail
    underflow cannot produce 0/0.
    """
    out = {}
    for t in ts:
        vals = []
        for x in np.atleast_1d(xs):
            xv = np.atleast_1d(x)
            r2 = float(xv @ xv)
            if r2 == 0.0:
                vals.append(0.0)
                continue
            d = xv.shape[0]
            log_ratio = (0.5 * p * np.log(r2)
                         - 0.5 * r2 / (c * t) + 0.5 * r2 / (c_ratio * c * t)
                         + 0.5 * d * np.log(c_ratio)
                         - 0.5 * p * np.log(t))
            vals.append(np.exp(log_ratio))
        out[float(t)] = float(max(vals))
    return out


def hermite_decay_sup(c, ts, xs, c_ratio=2.0):
    """Sampled sup of ``sqrt(t) * |hermite1(c t, x)| g(c t, x) / g(c_ratio c t, x)``.

    Bounded uniformly in t; the standard first-derivative Gaussian estimate.
    Evaluated in log space for the same underflow reason as spacetime_sup.
    """
    out = {}
    for t in ts:
        vals = []
        for x in np.atleast_1d(xs):
            xv = np.atleast_1d(x)
            r2 = float(xv @ xv)
            if r2 == 0.0:
                vals.append(0.0)
                continue
            d = xv.shape[0]
            log_h1 = 0.5 * np.log(r2) - np.log(c * t)
            log_ratio = (0.5 * np.log(t) + log_h1
                         - 0.5 * r2 / (c * t) + 0.5 * r2 / (c_ratio * c * t)
                         + 0.5 * d * np.log(c_ratio))
            vals.append(np.exp(log_ratio))
        out[float(t)] = float(max(vals))
    return out
