"""Gaussian helpers: orthant probabilities and singular-safe conditioning.

The bivariate case uses Owen's T function, so results are deterministic to
near machine precision; higher dimensions fall back to scipy's Genz
integrator, which is deterministic for fixed inputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

# Relative eigenvalue cutoff used everywhere a covariance may be singular.
EIG_CLIP = 1e-8


def norm_cdf(x):
    return special.ndtr(x)


def _bvn_cdf_scalar(h: float, k: float, rho: float) -> float:
    if abs(rho) >= 1.0 - 1e-12:
        if rho > 0:
            return float(special.ndtr(min(h, k)))
        return float(max(0.0, special.ndtr(h) + special.ndtr(k) - 1.0))
    # Owen's T formula needs h, k nonzero; a symmetric nudge is exact enough.
    if h == 0.0:
        h = 1e-14
    if k == 0.0:
        k = 1e-14
    denom = math.sqrt(1.0 - rho * rho)
    ah = (k - rho * h) / (h * denom)
    ak = (h - rho * k) / (k * denom)
    delta = 0.5 if h * k < 0 else 0.0
    val = (
        0.5 * (special.ndtr(h) + special.ndtr(k))
        - special.owens_t(h, ah)
        - special.owens_t(k, ak)
        - delta
    )
    return float(min(max(val, 0.0), 1.0))


def mvn_below(upper, mean, cov) -> float:
    """P(X_i < upper_i for all i) for X ~ N(mean, cov); singular-safe.

    Coordinates with (near-)zero variance contribute an indicator of their
    mean; the remaining block is evaluated exactly (dim <= 2) or with
    scipy's deterministic integrator.
    """
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = upper.size
    if n == 0:
        return 1.0
    var = np.diag(cov).copy()
    scale = max(float(np.max(var)), 1e-300)
    degenerate = var <= EIG_CLIP * scale
    if np.any(degenerate):
        if np.any(mean[degenerate] >= upper[degenerate]):
            return 0.0
        keep = ~degenerate
        return mvn_below(upper[keep], mean[keep], cov[np.ix_(keep, keep)])
    sd = np.sqrt(var)
    z = (upper - mean) / sd
    if n == 1:
        return float(special.ndtr(z[0]))
    corr = cov / np.outer(sd, sd)
    if n == 2:
        rho = float(np.clip(corr[0, 1], -1.0, 1.0))
        return _bvn_cdf_scalar(float(z[0]), float(z[1]), rho)
    corr = 0.5 * (corr + corr.T)
    val = stats.multivariate_normal.cdf(
        z, mean=np.zeros(n), cov=corr, allow_singular=True
    )
    return float(min(max(float(val), 0.0), 1.0))


def clipped_eigh(cov: np.ndarray, clip: float = EIG_CLIP):
    """Eigendecomposition with small/negative eigenvalues set to zero."""
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    tol = clip * max(float(np.max(np.abs(w))), 1e-300)
    w = np.where(w > tol, w, 0.0)
    return w, v


def gaussian_logpdf(x, mean, cov, clip: float = EIG_CLIP) -> float:
    """Log density of a (possibly singular) Gaussian, on its support.

    Uses the pseudo-determinant and pseudo-inverse; a value off the support
    returns -inf.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = x - mean
    w, v = clipped_eigh(np.atleast_2d(cov), clip)
    pos = w > 0
    proj = v.T @ d
    resid = proj[~pos]
    scale = math.sqrt(max(float(np.max(w)), 1e-300))
    if resid.size and np.max(np.abs(resid)) > 1e-6 * max(scale, 1.0):
        return -np.inf
    q = proj[pos] ** 2 / w[pos]
    rank = int(pos.sum())
    return float(-0.5 * (rank * math.log(2 * math.pi) + np.sum(np.log(w[pos])) + np.sum(q)))


def condition_gaussian(mean, cov, obs_idx, obs_values, clip: float = EIG_CLIP):
    """Condition N(mean, cov) on coordinates ``obs_idx`` taking ``obs_values``.

    Returns (conditional mean of the rest, conditional covariance,
    log density of the observed block).  Singular observed blocks are
    handled through the pseudo-inverse.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.size
    obs_idx = np.asarray(obs_idx, dtype=int)
    rest_idx = np.setdiff1d(np.arange(n), obs_idx)
    s_oo = cov[np.ix_(obs_idx, obs_idx)]
    s_ro = cov[np.ix_(rest_idx, obs_idx)]
    s_rr = cov[np.ix_(rest_idx, rest_idx)]
    dv = np.asarray(obs_values, dtype=float) - mean[obs_idx]
    w, v = clipped_eigh(s_oo, clip)
    pos = w > 0
    pinv = (v[:, pos] / w[pos]) @ v[:, pos].T
    gain = s_ro @ pinv
    cond_mean = mean[rest_idx] + gain @ dv
    cond_cov = s_rr - gain @ s_ro.T
    logpdf = gaussian_logpdf(obs_values, mean[obs_idx], s_oo, clip)
    return cond_mean, cond_cov, logpdf
