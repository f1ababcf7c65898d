"""Marginal model for station maxima: GEV distribution math, per-station
maximum-likelihood fitting, Gumbel transforms, a closed-form CRPS and
Kolmogorov-Smirnov goodness-of-fit tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .errors import FitError

EULER_GAMMA = 0.5772156649015329

# |shape| below this switches the log/exp formulas to their Gumbel limit;
# both branches agree to better than 1e-10 at the boundary.
SHAPE_EPS = 1e-8

# Shape is kept inside the finite-second-moment regime; the likelihood is
# -inf outside this box so the optimizer cannot leave it.
_SHAPE_MAX = 0.5
_SHAPE_MIN = -5.0

_KS_SERIES_TERMS = 100


@dataclass(frozen=True)
class GevParams:
    """Shape/location/scale triple of a generalized extreme value law.

    ``scale`` must be positive and ``shape`` below 0.5 (finite variance).
    """

    shape: float
    loc: float
    scale: float

    def __post_init__(self):
        if not np.isfinite(self.shape) or not np.isfinite(self.loc) or not np.isfinite(self.scale):
            raise ValueError("GEV parameters must be finite")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.shape >= _SHAPE_MAX:
            raise ValueError(f"shape must be < {_SHAPE_MAX}, got {self.shape}")


@dataclass(frozen=True)
class StationGevFit:
    """Per-station maximum-likelihood GEV fit with observed-information errors."""

    station: str
    params: GevParams
    se_shape: float
    se_loc: float
    se_scale: float
    loglik: float
    n_samples: int

    def __post_init__(self):
        if min(self.se_shape, self.se_loc, self.se_scale) < 0:
            raise ValueError("standard errors must be nonnegative")
        if self.n_samples < 1:
            raise ValueError("sample count must be >= 1")


@dataclass(frozen=True)
class StationMargins:
    """Fitted marginal model for one variable: common shape, per-station loc/scale."""

    tag: str
    shape: float
    loc: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class GumbelPanel:
    """Station x period matrix of values transformed to the standard Gumbel scale."""

    values: np.ndarray
    tag: str
    mask: Optional[np.ndarray] = None  # True marks missing entries

    def __post_init__(self):
        good = self.values if self.mask is None else self.values[~self.mask]
        if not np.all(np.isfinite(good)):
            raise ValueError("Gumbel panel contains non-finite entries")


def _shape_branches(shape: float) -> bool:
    return abs(shape) < SHAPE_EPS


def gev_cdf(x, params: GevParams):
    """GEV cumulative distribution function, clamped to {0, 1} off support."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite evaluation point")
    u = (x - params.loc) / params.scale
    if _shape_branches(params.shape):
        out = np.exp(-np.exp(-u))
    else:
        arg = 1.0 + params.shape * u
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            t = np.where(arg > 0, arg, 1.0) ** (-1.0 / params.shape)
            out = np.where(arg > 0, np.exp(-t), 0.0 if params.shape > 0 else 1.0)
    return float(out) if out.ndim == 0 else out


def gev_quantile(p, params: GevParams):
    """Inverse of :func:`gev_cdf` on (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("probability must lie strictly inside (0, 1)")
    ll = np.log(-np.log(p))
    if _shape_branches(params.shape):
        out = params.loc - params.scale * ll
    else:
        # ((-log p)^{-shape} - 1)/shape, written to stay accurate for small shape
        out = params.loc + params.scale * np.expm1(-params.shape * ll) / params.shape
    return float(out) if out.ndim == 0 else out


def _gev_negloglik(theta: np.ndarray, x: np.ndarray, fixed_shape: Optional[float]) -> float:
    if fixed_shape is None:
        loc, logscale, shape = theta
    else:
        loc, logscale = theta
        shape = fixed_shape
    if not (_SHAPE_MIN < shape < _SHAPE_MAX) or abs(logscale) > 50:
        return np.inf
    scale = math.exp(logscale)
    u = (x - loc) / scale
    if abs(shape) < SHAPE_EPS:
        return x.size * logscale + np.sum(u) + np.sum(np.exp(-u))
    arg = 1.0 + shape * u
    if np.any(arg <= 0):
        return np.inf
    log_arg = np.log1p(shape * u)
    return x.size * logscale + (1.0 + 1.0 / shape) * np.sum(log_arg) + np.sum(
        np.exp(-log_arg / shape)
    )


def gev_loglik(samples, params: GevParams) -> float:
    """GEV log-likelihood of a sample."""
    x = np.asarray(samples, dtype=float)
    return -_gev_negloglik(
        np.array([params.loc, math.log(params.scale), params.shape]), x, None
    )


def _pwm_start(x: np.ndarray) -> tuple[float, float, float]:
    """Probability-weighted-moment starting values (loc, scale, shape)."""
    xs = np.sort(x)
    n = xs.size
    i = np.arange(1, n + 1, dtype=float)
    b0 = xs.mean()
    b1 = np.sum((i - 1) / (n - 1) * xs) / n
    b2 = np.sum((i - 1) * (i - 2) / ((n - 1) * (n - 2)) * xs) / n
    c = (2 * b1 - b0) / (3 * b2 - b0) - math.log(2) / math.log(3)
    kappa = 7.8590 * c + 2.9554 * c * c  # opposite sign convention to our shape
    if abs(kappa) < 1e-6:
        scale = (2 * b1 - b0) / math.log(2)
        loc = b0 - EULER_GAMMA * scale
        shape = 0.0
    else:
        g = math.gamma(1 + kappa)
        scale = (2 * b1 - b0) * kappa / (g * (1 - 2 ** (-kappa)))
        loc = b0 + scale * (g - 1) / kappa
        shape = -kappa
    scale = max(scale, 1e-8 * max(1.0, abs(b0)))
    shape = min(max(shape, -0.45), 0.45)
    return loc, scale, shape


def _hessian(fun, theta: np.ndarray) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    k = theta.size
    h = 1e-4 * np.maximum(np.abs(theta), 1.0)
    out = np.empty((k, k))
    f0 = fun(theta)
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            if i == j:
                val = (fun(theta + ei) - 2 * f0 + fun(theta - ei)) / h[i] ** 2
            else:
                val = (
                    fun(theta + ei + ej)
                    - fun(theta + ei - ej)
                    - fun(theta - ei + ej)
                    + fun(theta - ei - ej)
                ) / (4 * h[i] * h[j])
            out[i, j] = out[j, i] = val
    return out


def fit_gev_mle(
    samples,
    fixed_shape: Optional[float] = None,
    station: str = "",
    maxiter: int = 10_000,
) -> StationGevFit:
    """Fit a GEV by maximum likelihood (Nelder-Mead on loc, log scale, shape).

    Starting values come from probability-weighted moments.  With
    ``fixed_shape`` the shape is held and only location and scale move.
    Standard errors are taken from the inverse observed information.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 20:
        raise ValueError(f"need at least 20 samples, got {x.size}")
    if np.ptp(x) == 0:
        raise ValueError("degenerate sample: all values equal")

    loc0, scale0, shape0 = _pwm_start(x)
    if fixed_shape is not None and not (_SHAPE_MIN < fixed_shape < _SHAPE_MAX):
        raise ValueError(f"fixed shape outside ({_SHAPE_MIN}, {_SHAPE_MAX})")
    # Repair infeasible starts (support violations): widen the scale and pull
    # the shape toward the Gumbel case until the likelihood is finite.
    for _ in range(60):
        if fixed_shape is None:
            theta0 = np.array([loc0, math.log(scale0), shape0])
        else:
            theta0 = np.array([loc0, math.log(scale0)])
        if np.isfinite(_gev_negloglik(theta0, x, fixed_shape)):
            break
        scale0 *= 1.5
        shape0 *= 0.7
    else:
        raise FitError("could not find a feasible GEV starting point")

    res = optimize.minimize(
        _gev_negloglik,
        theta0,
        args=(x, fixed_shape),
        method="Nelder-Mead",
        options={"maxiter": maxiter, "maxfev": maxiter, "xatol": 1e-10, "fatol": 1e-10},
    )
    if not np.isfinite(res.fun):
        raise FitError("GEV likelihood not finite at optimizer output")
    if not res.success:
        raise FitError(f"GEV optimizer did not converge within {maxiter} iterations")

    if fixed_shape is None:
        loc, logscale, shape = res.x
    else:
        loc, logscale = res.x
        shape = fixed_shape
    scale = math.exp(logscale)

    # Observed information in the natural (loc, scale[, shape]) coordinates.
    if fixed_shape is None:
        def nll_nat(t):
            return _gev_negloglik(np.array([t[0], math.log(t[1]), t[2]]), x, None)

        hess = _hessian(nll_nat, np.array([loc, scale, shape]))
    else:
        def nll_nat(t):
            return _gev_negloglik(np.array([t[0], math.log(t[1])]), x, fixed_shape)

        hess = _hessian(nll_nat, np.array([loc, scale]))
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError as exc:
        raise FitError("observed information matrix is singular") from exc
    var = np.diag(cov)
    if np.any(var <= 0):
        raise FitError("observed information matrix is not positive definite")
    if fixed_shape is None:
        se_loc, se_scale, se_shape = np.sqrt(var)
    else:
        se_loc, se_scale = np.sqrt(var)
        se_shape = 0.0

    return StationGevFit(
        station=station,
        params=GevParams(shape=shape, loc=loc, scale=scale),
        se_shape=float(se_shape),
        se_loc=float(se_loc),
        se_scale=float(se_scale),
        loglik=float(-res.fun),
        n_samples=int(x.size),
    )


def _ks_statistic(sorted_values: np.ndarray, cdf_values: np.ndarray) -> float:
    n = sorted_values.size
    i = np.arange(1, n + 1, dtype=float)
    d_plus = np.max(i / n - cdf_values)
    d_minus = np.max(cdf_values - (i - 1) / n)
    return float(max(d_plus, d_minus))


def kolmogorov_pvalue(statistic: float, n: int, terms: int = _KS_SERIES_TERMS) -> float:
    """Asymptotic Kolmogorov p-value, 2*sum (-1)^{k-1} exp(-2 k^2 n D^2)."""
    k = np.arange(1, terms + 1, dtype=float)
    p = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * n * statistic * statistic))
    return float(min(max(p, 0.0), 1.0))


def gumbel_cdf(x):
    """Standard Gumbel distribution function."""
    return np.exp(-np.exp(-np.asarray(x, dtype=float)))


def ks_test_gumbel(values) -> tuple[float, float]:
    """One-sample KS test of a sample against the standard Gumbel law.

    Returns (statistic, p-value); the p-value uses the asymptotic
    Kolmogorov series.
    """
    x = np.sort(np.asarray(values, dtype=float))
    if x.size < 5:
        raise ValueError(f"need at least 5 values, got {x.size}")
    d = _ks_statistic(x, gumbel_cdf(x))
    return d, kolmogorov_pvalue(d, x.size)


_PARAM_PICKERS = {
    "shape": lambda f: (f.params.shape, f.se_shape),
    "loc": lambda f: (f.params.loc, f.se_loc),
    "scale": lambda f: (f.params.scale, f.se_scale),
}


def spatial_constancy_test(fits: Sequence[StationGevFit], which: str) -> tuple[np.ndarray, float]:
    """Test whether one GEV parameter is constant across stations.

    Standardized residuals (estimate - across-station mean) / s.e. are
    compared to the standard normal with a one-sample KS test.
    """
    if which not in _PARAM_PICKERS:
        raise ValueError(f"unknown parameter selector {which!r}")
    if len(fits) < 2:
        raise ValueError("need at least 2 station fits")
    pick = _PARAM_PICKERS[which]
    est = np.array([pick(f)[0] for f in fits])
    se = np.array([pick(f)[1] for f in fits])
    if np.any(se <= 0):
        raise ValueError(f"zero standard error for {which!r} at some station")
    residuals = (est - est.mean()) / se
    rs = np.sort(residuals)
    d = _ks_statistic(rs, special.ndtr(rs))
    return residuals, kolmogorov_pvalue(d, rs.size)


def to_gumbel(v, m, s, params: GevParams):
    """Map a raw value onto the standard Gumbel scale.

    ``m``/``s`` are the location-scale normalizers of the raw variable, so
    the composed GEV has location m + s*loc and scale s*scale.
    """
    v = np.asarray(v, dtype=float)
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr <= 0):
        raise ValueError("normalizing scale must be positive")
    w = (v - np.asarray(m, dtype=float) - s_arr * params.loc) / (s_arr * params.scale)
    if _shape_branches(params.shape):
        out = w
    else:
        arg = 1.0 + params.shape * w
        if np.any(arg <= 0):
            raise ValueError("value outside the GEV support (log argument <= 0)")
        out = np.log1p(params.shape * w) / params.shape
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def from_gumbel(x, m, s, params: GevParams):
    """Inverse of :func:`to_gumbel`; overflow raises instead of saturating."""
    x = np.asarray(x, dtype=float)
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr <= 0):
        raise ValueError("normalizing scale must be positive")
    if _shape_branches(params.shape):
        t = x
    else:
        if np.any(params.shape * x > 700):
            raise OverflowError("shape * x too large: result would overflow")
        t = np.expm1(params.shape * x) / params.shape
    out = np.asarray(s_arr * params.scale * t + m + s_arr * params.loc, dtype=float)
    return float(out) if out.ndim == 0 else out


def _gev_tail_exponent(x, params: GevParams):
    """-log F(x), computed directly from the inner power to keep precision."""
    u = (np.asarray(x, dtype=float) - params.loc) / params.scale
    if _shape_branches(params.shape):
        with np.errstate(over="ignore"):
            return np.exp(-u)
    arg = 1.0 + params.shape * u
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        t = np.where(arg > 0, arg, 1.0) ** (-1.0 / params.shape)
    if params.shape > 0:
        return np.where(arg > 0, t, np.inf)
    return np.where(arg > 0, t, 0.0)


def crps_gev(params: GevParams, x):
    """Continuous ranked probability score of a GEV forecast at ``x``.

    Closed form via the lower incomplete gamma function for shape != 0 and
    via the exponential integral in the Gumbel case; both validated against
    numerical quadrature of the defining integral.
    """
    if params.shape >= 1:
        raise ValueError("CRPS requires shape < 1 (finite mean)")
    x = np.asarray(x, dtype=float)
    t = _gev_tail_exponent(x, params)
    with np.errstate(over="ignore"):
        cdf = np.exp(-t)
    shape, loc, scale = params.shape, params.loc, params.scale
    if _shape_branches(shape):
        e1 = np.where(np.isinf(t), 0.0, special.exp1(np.where(np.isinf(t), 1.0, t)))
        out = loc - x + scale * (EULER_GAMMA - math.log(2)) + 2 * scale * e1
    else:
        # lower incomplete gamma, unregularized
        gamma_1ms = math.gamma(1 - shape)
        glow = special.gammainc(1 - shape, np.where(np.isinf(t), 1.0, t)) * gamma_1ms
        glow = np.where(np.isinf(t), gamma_1ms, glow)
        out = (x - loc + scale / shape) * (2 * cdf - 1) - (scale / shape) * (
            2**shape * gamma_1ms - 2 * glow
        )
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def gumbel_panel(standardized: np.ndarray, margins: StationMargins,
                 mask: Optional[np.ndarray] = None) -> GumbelPanel:
    """Transform a standardized station x period panel to Gumbel margins."""
    y = np.asarray(standardized, dtype=float)
    out = np.empty_like(y)
    for i in range(y.shape[0]):
        params = GevParams(margins.shape, float(margins.loc[i]), float(margins.scale[i]))
        row = y[i]
        if mask is not None:
            row = np.where(mask[i], params.loc, row)  # placeholder, masked below
        vals = to_gumbel(row, 0.0, 1.0, params)
        out[i] = vals
    if mask is not None:
        out = np.where(mask, np.nan, out)
    return GumbelPanel(values=out, tag=margins.tag, mask=mask)
