"""Nonparametric dependence estimation and weighted least-squares model fits.

Pairwise extremal coefficients are estimated from rank-based F-madograms,
weighted by grouped-jackknife variances, and a parametric (cross-)variogram
is fitted by derivative-free least squares on the extremal-coefficient
scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import optimize, special, stats

from .errors import FitError
from .variogram import (
    OBS,
    PRED,
    Anisotropy,
    CrossVariogram,
    PowerVariogram,
    cross_variogram,
    power_variogram,
)

Params = Union[PowerVariogram, CrossVariogram]

UNIVARIATE = "univariate"
BIVARIATE = "bivariate"


@dataclass(frozen=True)
class ThetaEstimate:
    """One pairwise extremal-coefficient estimate with its jackknife variance."""

    i: int
    j: int
    components: tuple[str, str]
    lag: tuple[float, float]
    theta: float
    variance: float

    def __post_init__(self):
        if not (1.0 <= self.theta <= 2.0):
            raise ValueError("theta must lie in [1, 2]")
        if not np.isfinite(self.variance) or self.variance < 0:
            raise ValueError("variance must be finite and nonnegative")


@dataclass(frozen=True)
class FitResult:
    """Outcome of a weighted least-squares dependence fit."""

    params: Params
    objective: float
    iterations: int
    converged: bool
    n_excluded: int = 0

    def __post_init__(self):
        if self.objective < 0:
            raise ValueError("objective must be nonnegative")


def fmadogram(series_a, series_b) -> float:
    """Rank-based F-madogram of two equally long series (ties -> average rank)."""
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("series must be 1-d and equally long")
    n = a.size
    if n < 2:
        raise ValueError("need at least 2 periods")
    ra = stats.rankdata(a, method="average")
    rb = stats.rankdata(b, method="average")
    return float(np.sum(np.abs(ra - rb)) / (2.0 * n * (n - 1)))


def theta_from_madogram(nu_hat: float) -> float:
    """Map an F-madogram value to an extremal coefficient, clamped to [1, 2]."""
    if nu_hat < 0:
        raise ValueError("madogram value must be nonnegative")
    if nu_hat >= 0.5:
        return 2.0
    raw = (1.0 + 2.0 * nu_hat) / (1.0 - 2.0 * nu_hat)
    return float(min(max(raw, 1.0), 2.0))


def _theta_pair(a: np.ndarray, b: np.ndarray) -> float:
    return theta_from_madogram(fmadogram(a, b))


def jackknife_variance(series_a, series_b, blocks) -> float:
    """Delete-one-block jackknife variance of the pairwise theta estimate.

    ``blocks`` holds one group label per period; the estimate is recomputed
    leaving out each group and the variance is (B-1)/B times the squared
    spread of the leave-out estimates.
    """
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    labels = np.asarray(blocks)
    if labels.shape != a.shape:
        raise ValueError("block labels must align with the series")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("need at least 2 blocks")
    thetas = []
    for lab in uniq:
        keep = labels != lab
        if keep.sum() < 2:
            raise ValueError("leave-one-out panel has fewer than 2 periods")
        thetas.append(_theta_pair(a[keep], b[keep]))
    thetas = np.asarray(thetas)
    nb = thetas.size
    return float((nb - 1) / nb * np.sum((thetas - thetas.mean()) ** 2))


def _pair_ranks(panel: np.ndarray) -> np.ndarray:
    """Within-series average ranks along the period axis."""
    return np.apply_along_axis(stats.rankdata, 1, panel)


def _theta_matrix(ranks_a: np.ndarray, ranks_b: np.ndarray, n_p: int) -> np.ndarray:
    """Pairwise theta estimates between the rows of two rank panels."""
    n_a, n_b = ranks_a.shape[0], ranks_b.shape[0]
    out = np.empty((n_a, n_b))
    denom = 2.0 * n_p * (n_p - 1)
    for i in range(n_a):
        nu = np.sum(np.abs(ranks_a[i][None, :] - ranks_b), axis=1) / denom
        raw = np.where(nu >= 0.5, 2.0, (1.0 + 2.0 * nu) / (1.0 - 2.0 * np.minimum(nu, 0.49999999)))
        out[i] = np.clip(raw, 1.0, 2.0)
    return out


def estimate_thetas(
    panels: dict[str, np.ndarray],
    coords: np.ndarray,
    blocks,
    kind: str,
    mask: Optional[np.ndarray] = None,
) -> list[ThetaEstimate]:
    """Pairwise extremal-coefficient estimates with jackknife variances.

    ``panels`` maps component tags to station x period matrices on the
    Gumbel scale.  The univariate table covers unordered station pairs of
    one component; the bivariate table covers ordered station pairs for all
    four component pairs, keeping the colocated cross-component entry.
    Missing entries (``mask`` True) are excluded pairwise; pairs left with
    fewer than 2 common periods in any jackknife block are dropped.
    """
    coords = np.asarray(coords, dtype=float)
    labels = np.asarray(blocks)
    if kind == UNIVARIATE:
        tags = [(OBS, OBS)]
        panel_keys = {OBS: panels[OBS]}
    elif kind == BIVARIATE:
        tags = [(k1, k2) for k1 in (OBS, PRED) for k2 in (OBS, PRED)]
        panel_keys = {OBS: panels[OBS], PRED: panels[PRED]}
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    n_l, n_p = next(iter(panel_keys.values())).shape
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("jackknife weights need at least 2 period blocks")
    block_masks = [labels != lab for lab in uniq]
    nb = len(uniq)
    if mask is not None and not np.any(mask):
        mask = None

    out: list[ThetaEstimate] = []
    if mask is None:
        # Dense fast path: rank transforms shared across pairs.
        ranks_full = {k: _pair_ranks(v) for k, v in panel_keys.items()}
        ranks_loo = {
            k: [_pair_ranks(v[:, m]) for m in block_masks] for k, v in panel_keys.items()
        }
        for k1, k2 in tags:
            th = _theta_matrix(ranks_full[k1], ranks_full[k2], n_p)
            loo = np.stack(
                [
                    _theta_matrix(
                        ranks_loo[k1][b], ranks_loo[k2][b], int(block_masks[b].sum())
                    )
                    for b in range(nb)
                ]
            )
            var = (nb - 1) / nb * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0)
            for i, j in _pair_indices(n_l, kind, k1, k2):
                lag = coords[i] - coords[j]
                out.append(
                    ThetaEstimate(
                        i=i,
                        j=j,
                        components=(k1, k2),
                        lag=(float(lag[0]), float(lag[1])),
                        theta=float(th[i, j]),
                        variance=float(var[i, j]),
                    )
                )
        return out

    # Pairwise-complete path for panels with missing observations.
    good = ~mask
    for k1, k2 in tags:
        a_panel, b_panel = panel_keys[k1], panel_keys[k2]
        for i, j in _pair_indices(n_l, kind, k1, k2):
            common = good[i] & good[j]
            if common.sum() < 2:
                continue
            a, b = a_panel[i, common], b_panel[j, common]
            lab = labels[common]
            if np.unique(lab).size < 2:
                continue
            if any((lab != u).sum() < 2 for u in np.unique(lab)):
                continue
            lag = coords[i] - coords[j]
            out.append(
                ThetaEstimate(
                    i=i,
                    j=j,
                    components=(k1, k2),
                    lag=(float(lag[0]), float(lag[1])),
                    theta=_theta_pair(a, b),
                    variance=jackknife_variance(a, b, lab),
                )
            )
    return out


def _pair_indices(n_l: int, kind: str, k1: str, k2: str):
    if kind == UNIVARIATE:
        return [(i, j) for i in range(n_l) for j in range(i + 1, n_l)]
    return [(i, j) for i in range(n_l) for j in range(n_l) if i != j or k1 != k2]


def usable_estimates(estimates: Sequence[ThetaEstimate]) -> tuple[list[ThetaEstimate], int]:
    """Drop pairs that cannot carry a least-squares weight; report how many.

    Zero jackknife variance means the leave-out estimates never moved.
    Estimates clamped at the upper bound 2 are censored, and their jackknife
    variance collapses with them (the leave-out estimates clamp too), which
    would hand them essentially infinite weight; they are excluded as well.
    """
    kept = [e for e in estimates if e.variance > 0 and e.theta < 2.0]
    return kept, len(estimates) - len(kept)


def _model_thetas(estimates: Sequence[ThetaEstimate], params: Params) -> np.ndarray:
    lags = np.array([e.lag for e in estimates])
    if isinstance(params, PowerVariogram):
        gam = power_variogram(lags, params)
    else:
        g = cross_variogram(lags, params)
        from .variogram import COMPONENT_INDEX

        ci = np.array([COMPONENT_INDEX[e.components[0]] for e in estimates])
        cj = np.array([COMPONENT_INDEX[e.components[1]] for e in estimates])
        gam = g[np.arange(len(estimates)), ci, cj]
    return 2.0 * special.ndtr(np.sqrt(gam / 2.0))


def _make_fast_objective(estimates: Sequence[ThetaEstimate], kind: str):
    """Same objective as :func:`wls_objective`, but evaluating the model only
    on the unique lags (ordered pairs and component pairs share them)."""
    from .variogram import COMPONENT_INDEX

    lags = np.array([e.lag for e in estimates])
    # the variogram is even in h, so canonicalize the sign before dedup
    flip = (lags[:, 0] < 0) | ((lags[:, 0] == 0) & (lags[:, 1] < 0))
    canon = np.where(flip[:, None], -lags, lags)
    uniq, inv = np.unique(canon, axis=0, return_inverse=True)
    ci = np.array([COMPONENT_INDEX[e.components[0]] for e in estimates])
    cj = np.array([COMPONENT_INDEX[e.components[1]] for e in estimates])
    th_hat = np.array([e.theta for e in estimates])
    var = np.array([e.variance for e in estimates])
    scale = np.sqrt(var) if kind == UNIVARIATE else var

    def objective(params: Params) -> float:
        if isinstance(params, PowerVariogram):
            gam = power_variogram(uniq, params)[inv]
        else:
            g = cross_variogram(uniq, params)
            gam = g[inv, ci, cj]
        th_mod = 2.0 * special.ndtr(np.sqrt(gam / 2.0))
        return float(np.sum(((th_hat - th_mod) / scale) ** 2))

    return objective


def wls_objective(estimates: Sequence[ThetaEstimate], params: Params, kind: str) -> float:
    """Weighted least-squares misfit between estimated and model thetas.

    The univariate fit scales residuals by the standard deviation of the
    estimate; the bivariate fit scales them by the variance.  The two
    conventions intentionally differ (they follow the respective fitting
    recipes) and are not reconciled here.
    """
    if not estimates:
        raise ValueError("estimate list is empty")
    var = np.array([e.variance for e in estimates])
    if np.any(var <= 0):
        raise ValueError("all variances must be positive; exclude zero-variance pairs first")
    th_hat = np.array([e.theta for e in estimates])
    th_mod = _model_thetas(estimates, params)
    scale = np.sqrt(var) if kind == UNIVARIATE else var
    return float(np.sum(((th_hat - th_mod) / scale) ** 2))


# --- parameter transforms: unconstrained optimizer space <-> valid models ---

def _canonical_aniso(log_ratio: float, angle: float) -> tuple[float, float, float]:
    """Reduce (ratio, angle) by the quarter-turn equivalence; returns
    (scale multiplier, ratio, angle) with angle in (-pi/4, pi/4]."""
    ratio = math.exp(min(max(log_ratio, -12.0), 12.0))
    mult = 1.0
    angle = math.remainder(angle, math.pi)  # A(b, z) = A(b, z + pi) up to sign
    while angle > math.pi / 4:
        angle -= math.pi / 2
        mult *= ratio
        ratio = 1.0 / ratio
    while angle <= -math.pi / 4:
        angle += math.pi / 2
        mult *= ratio
        ratio = 1.0 / ratio
    return mult, ratio, angle


def _univ_from_vec(v: np.ndarray) -> PowerVariogram:
    mult, ratio, angle = _canonical_aniso(v[1], v[2])
    scale = math.exp(min(max(v[0], -30.0), 30.0)) * mult
    exponent = 2.0 / (1.0 + math.exp(-min(max(v[3], -40.0), 40.0)))
    return PowerVariogram(scale=scale, aniso=Anisotropy(ratio, angle), exponent=exponent)


def _univ_to_vec(p: PowerVariogram) -> np.ndarray:
    ex = min(max(p.exponent, 1e-6), 2.0 - 1e-9)
    return np.array(
        [
            math.log(p.scale),
            math.log(p.aniso.ratio),
            p.aniso.angle,
            math.log(ex / (2.0 - ex)),
        ]
    )


_NU_MAX = 10.0  # Bessel accuracy is only vouched for on (0, 10]


def _biv_from_vec(v: np.ndarray) -> CrossVariogram:
    mult, ratio, angle = _canonical_aniso(v[2], v[3])
    ex = np.clip(v, -30.0, 30.0)
    nu1 = _NU_MAX / (1.0 + math.exp(-ex[7]))
    nu2 = _NU_MAX / (1.0 + math.exp(-ex[9]))
    rho_bound = 2.0 * math.sqrt(nu1 * nu2) / (nu1 + nu2)
    return CrossVariogram(
        sigma=math.exp(ex[0]),
        kappa=math.exp(ex[1]) * mult,
        aniso=Anisotropy(ratio, angle),
        beta=1.0 / (1.0 + math.exp(-ex[4])),
        c=math.exp(ex[5]),
        sigma1=math.exp(ex[6]),
        nu1=nu1,
        sigma2=math.exp(ex[8]),
        nu2=nu2,
        a=math.exp(ex[10]) * mult,
        rho=rho_bound * math.tanh(ex[11]),
    )


def _biv_to_vec(p: CrossVariogram) -> np.ndarray:
    beta = min(max(p.beta, 1e-9), 1 - 1e-9)
    t = min(max(p.rho / p.rho_bound, -1 + 1e-12), 1 - 1e-12)
    f1 = min(max(p.nu1 / _NU_MAX, 1e-9), 1 - 1e-9)
    f2 = min(max(p.nu2 / _NU_MAX, 1e-9), 1 - 1e-9)
    return np.array(
        [
            math.log(p.sigma),
            math.log(p.kappa),
            math.log(p.aniso.ratio),
            p.aniso.angle,
            math.log(beta / (1 - beta)),
            math.log(max(p.c, 1e-10)),
            math.log(max(p.sigma1, 1e-10)),
            math.log(f1 / (1 - f1)),
            math.log(max(p.sigma2, 1e-10)),
            math.log(f2 / (1 - f2)),
            math.log(p.a),
            math.atanh(t),
        ]
    )


def default_starts(
    estimates: Sequence[ThetaEstimate], kind: str, n_starts: int = 20, seed=0
) -> list[Params]:
    """Multistart draws from data-informed prior boxes."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dists = np.array([math.hypot(*e.lag) for e in estimates])
    dists = dists[dists > 0]
    d_lo = max(np.min(dists), 1e-6) if dists.size else 1.0
    d_hi = max(np.max(dists), d_lo * 2)
    out: list[Params] = []
    for _ in range(n_starts):
        ratio = math.exp(rng.uniform(-0.8, 0.8))
        angle = rng.uniform(-math.pi / 4 + 1e-6, math.pi / 4)
        if kind == UNIVARIATE:
            out.append(
                PowerVariogram(
                    scale=math.exp(rng.uniform(math.log(0.3 / d_hi), math.log(20.0 / d_lo))),
                    aniso=Anisotropy(ratio, angle),
                    exponent=rng.uniform(0.3, 1.9),
                )
            )
        elif kind == BIVARIATE:
            nu1 = math.exp(rng.uniform(math.log(0.3), math.log(3.0)))
            nu2 = math.exp(rng.uniform(math.log(0.3), math.log(3.0)))
            bound = 2.0 * math.sqrt(nu1 * nu2) / (nu1 + nu2)
            out.append(
                CrossVariogram(
                    sigma=math.exp(rng.uniform(math.log(0.3), math.log(4.0))),
                    kappa=math.exp(rng.uniform(math.log(0.3 / d_hi), math.log(10.0 / d_lo))),
                    aniso=Anisotropy(ratio, angle),
                    beta=rng.uniform(0.15, 0.85),
                    c=rng.uniform(0.0, 1.0),
                    sigma1=rng.uniform(0.2, 1.5),
                    nu1=nu1,
                    sigma2=rng.uniform(0.2, 1.5),
                    nu2=nu2,
                    a=math.exp(rng.uniform(math.log(0.3 / d_hi), math.log(10.0 / d_lo))),
                    rho=rng.uniform(-0.9, 0.9) * bound,
                )
            )
        else:
            raise ValueError(f"unknown model kind {kind!r}")
    return out


def fit_dependence(
    estimates: Sequence[ThetaEstimate],
    kind: str,
    starts: Optional[Sequence[Params]] = None,
    n_starts: int = 20,
    seed=0,
    maxiter: int = 2000,
    n_polish: int = 25,
) -> FitResult:
    """Minimize :func:`wls_objective` over valid parameters, best of multistart.

    Constraints are enforced by log/logit/tanh reparameterization, so every
    candidate evaluated is a valid model.  The best start is polished by
    re-running the simplex from its optimum.  Deterministic given the start
    list (or ``seed``, from which default starts are drawn).
    """
    kept, n_excluded = usable_estimates(list(estimates))
    if not kept:
        raise FitError("no usable estimates: all pairs had zero variance")
    if starts is None:
        starts = default_starts(kept, kind, n_starts=n_starts, seed=seed)
    if not starts:
        raise ValueError("need at least one start")

    to_vec = _univ_to_vec if kind == UNIVARIATE else _biv_to_vec
    from_vec = _univ_from_vec if kind == UNIVARIATE else _biv_from_vec
    fast_objective = _make_fast_objective(kept, kind)

    def objective(v: np.ndarray) -> float:
        try:
            return fast_objective(from_vec(v))
        except (ValueError, FloatingPointError, OverflowError):
            return np.inf

    best = None
    total_iter = 0
    for start in starts:
        v0 = to_vec(start)
        if not np.isfinite(objective(v0)):
            continue
        res = optimize.minimize(
            objective,
            v0,
            method="Nelder-Mead",
            options={"maxiter": maxiter, "maxfev": 2 * maxiter, "xatol": 1e-6, "fatol": 1e-10},
        )
        total_iter += res.nit
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("no start produced a finite objective")

    # Converged means stable under simplex restarts: either the optimizer
    # reported convergence or a fresh restart no longer improves the optimum.
    converged = bool(best.success)
    for _ in range(n_polish):
        res = optimize.minimize(
            objective,
            best.x,
            method="Nelder-Mead",
            options={"maxiter": maxiter, "maxfev": 2 * maxiter, "xatol": 1e-6, "fatol": 1e-10},
        )
        total_iter += res.nit
        if res.fun > best.fun:
            converged = True
            break
        improvement = best.fun - res.fun
        best = res
        if bool(res.success) or improvement <= 1e-4 * max(abs(best.fun), 1e-12):
            converged = True
            break
    return FitResult(
        params=from_vec(best.x),
        objective=float(best.fun),
        iterations=int(total_iter),
        converged=converged,
        n_excluded=n_excluded,
    )
