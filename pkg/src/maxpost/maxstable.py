"""Exact simulation of max-stable fields with Gaussian spectral processes.

Works on the standard Gumbel scale throughout.  The sampler follows the
extremal-functions construction: sites are processed in turn, Poisson
points are generated in decreasing order of their value at the current
site, and a candidate function is kept only when it does not exceed the
running maximum at any previously processed site.  The law of the field is
determined entirely by the pairwise pseudo-variogram distances, so the
bivariate model is handled as a univariate one on the doubled index set
(site, component).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import special

from .variogram import (
    COMPONENT_INDEX,
    OBS,
    CrossVariogram,
    PowerVariogram,
    cross_variogram,
    matern_correlation,
    power_variogram,
)

# Eigenvalues of nominally positive semidefinite matrices may round below
# zero; anything above -EIG_CLIP * trace is clipped, anything below raises.
EIG_CLIP = 1e-8

Model = Union[PowerVariogram, CrossVariogram]


def _seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _tagged_child(seed, tag: int) -> np.random.SeedSequence:
    """Child stream in a namespace disjoint from ordinary spawn() children."""
    root = _seedseq(seed)
    return np.random.SeedSequence(
        entropy=root.entropy, spawn_key=tuple(root.spawn_key) + (1 << 24, tag)
    )


@dataclass(frozen=True)
class GaussianSpec:
    """Finite-dimensional law of the anchored Gaussian increment field."""

    locations: np.ndarray
    cov: np.ndarray
    n_components: int
    variances: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance matrix must be square")
        if self.n_components * len(self.locations) != cov.shape[0]:
            raise ValueError("covariance dimension inconsistent with locations/components")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("covariance matrix must be symmetric")


@dataclass(frozen=True)
class MaxStableSample:
    """One simulated field on the Gumbel scale, components x locations."""

    locations: np.ndarray
    n_components: int
    values: np.ndarray
    seed_entropy: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("simulated values must be finite")


def psd_factor(cov: np.ndarray, clip: float = EIG_CLIP) -> np.ndarray:
    """Symmetric factor L with L L^T = cov, clipping tiny negative eigenvalues.

    Raises if the matrix is indefinite beyond ``clip * trace``.
    """
    cov = np.asarray(cov, dtype=float)
    w, v = np.linalg.eigh(cov)
    tol = clip * max(np.trace(cov), 1e-300)
    if w.min() < -tol:
        raise ValueError(
            f"matrix is indefinite beyond tolerance: min eigenvalue {w.min():.3e}"
        )
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)


def pseudo_distance_matrix(
    locations: np.ndarray, model: Model, components: Optional[np.ndarray] = None
) -> np.ndarray:
    """Matrix of pseudo-variogram distances d(u, v) = Var(W_u - W_v) / 2.

    ``components`` gives the component index per coordinate for the
    bivariate model; for the univariate model it must be omitted or zero.
    """
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    lags = locations[:, None, :] - locations[None, :, :]
    if isinstance(model, PowerVariogram):
        return power_variogram(lags, model)
    g = cross_variogram(lags, model)
    if components is None:
        components = np.zeros(len(locations), dtype=int)
    ci = np.asarray(components, dtype=int)
    return g[np.arange(len(ci))[:, None], np.arange(len(ci))[None, :], ci[:, None], ci[None, :]]


def anchored_mean_cov(dist: np.ndarray, anchor: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the increment field pinned to zero at ``anchor``.

    The mean is the drift of a spectral function anchored there; the
    covariance is K[i, j] = d(i, a) + d(j, a) - d(i, j).
    """
    da = dist[:, anchor]
    mean = -da
    cov = da[:, None] + da[None, :] - dist
    return mean, cov


def cov_from_variogram(locations, model: Model, anchor: int = 0) -> GaussianSpec:
    """Gaussian spec of the spectral increment field anchored at one location.

    Univariate: Cov(W(s_i), W(s_j)) = g(s_i - s_0) + g(s_j - s_0) - g(s_i - s_j).
    Bivariate: the shared long-range field is anchored the same way and the
    stationary Matérn block covariance (plus the constant effect on the
    forecast component) is added; coordinates are ordered component-major.
    """
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    n = len(locations)
    if n < 1:
        raise ValueError("need at least one location")
    if not 0 <= anchor < n:
        raise ValueError(f"anchor index {anchor} out of range")
    lags = locations[:, None, :] - locations[None, :, :]

    if isinstance(model, PowerVariogram):
        g = power_variogram(lags, model)
        ga = g[:, anchor]
        cov = ga[:, None] + ga[None, :] - g
        spec = GaussianSpec(locations, cov, 1, np.diag(cov).copy())
    else:
        from .variogram import common_variogram

        g0 = common_variogram(lags, model)
        g0a = g0[:, anchor]
        shared = g0a[:, None] + g0a[None, :] - g0
        r = np.sqrt(np.sum((lags @ model.aniso.matrix.T) ** 2, axis=-1))
        c11 = model.sigma1**2 * matern_correlation(r, model.nu1, model.a)
        c22 = model.c**2 + model.sigma2**2 * matern_correlation(r, model.nu2, model.a)
        c12 = model.rho * model.sigma1 * model.sigma2 * matern_correlation(r, model.nu12, model.a)
        cov = np.block([[shared + c11, shared + c12], [shared + c12.T, shared + c22]])
        spec = GaussianSpec(locations, cov, 2, np.diag(cov).copy())
    psd_factor(spec.cov)  # indefiniteness beyond tolerance raises here
    return spec


def sample_gaussian(spec: GaussianSpec, seed) -> np.ndarray:
    """One zero-mean Gaussian vector with the spec covariance (symmetric factor)."""
    rng = np.random.Generator(np.random.PCG64(_seedseq(seed)))
    factor = psd_factor(spec.cov)
    return factor @ rng.standard_normal(spec.cov.shape[0])


def _extremal_factors(dist: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-anchor drift vectors and covariance factors for the sampler."""
    m = dist.shape[0]
    factors = []
    for n in range(m):
        _, cov = anchored_mean_cov(dist, n)
        factors.append(psd_factor(cov))
    return -dist.T.copy(), factors  # means[n] = -dist[:, n]


def _extremal_sample(rng: np.random.Generator, means: np.ndarray, factors: list) -> np.ndarray:
    m = means.shape[0]
    z_field = np.full(m, -np.inf)
    for n in range(m):
        acc = rng.standard_exponential()
        z = -math.log(acc)
        while z > z_field[n]:
            phi = z + means[n] + factors[n] @ rng.standard_normal(m)
            if n == 0 or np.all(phi[:n] < z_field[:n]):
                np.maximum(z_field, phi, out=z_field)
            acc += rng.standard_exponential()
            z = -math.log(acc)
    return z_field


def simulate_brown_resnick(
    locations, model: Model, n_rep: int, seed
) -> list[MaxStableSample]:
    """Exact replicates of the max-stable field with standard Gumbel margins.

    Replicates are independent, each driven by its own child stream spawned
    from the master seed, so results do not depend on evaluation order.
    """
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    if len(locations) == 0:
        raise ValueError("location list is empty")
    if n_rep < 1:
        raise ValueError("need at least one replicate")
    n_comp = 2 if isinstance(model, CrossVariogram) else 1
    if n_comp == 2:
        coords = np.vstack([locations, locations])
        comps = np.repeat([0, 1], len(locations))
        dist = pseudo_distance_matrix(coords, model, comps)
    else:
        dist = pseudo_distance_matrix(locations, model)
    means, factors = _extremal_factors(dist)
    children = _seedseq(seed).spawn(n_rep)
    out = []
    for child in children:
        rng = np.random.Generator(np.random.PCG64(child))
        values = _extremal_sample(rng, means, factors).reshape(n_comp, len(locations))
        out.append(
            MaxStableSample(
                locations=locations,
                n_components=n_comp,
                values=values,
                seed_entropy=tuple(child.spawn_key),
            )
        )
    return out


def simulate_brown_resnick_panel(locations, model: Model, n_rep: int, seed) -> np.ndarray:
    """Stacked replicate values, shape (n_rep, n_components, n_locations)."""
    samples = simulate_brown_resnick(locations, model, n_rep, seed)
    return np.stack([s.values for s in samples])


def extremal_coefficient(
    model: Model, s1, s2, components: tuple[str, str] = (OBS, OBS)
) -> float:
    """Pairwise extremal coefficient 2 Phi(sqrt(gamma / 2)) in [1, 2]."""
    lag = np.asarray(s1, dtype=float) - np.asarray(s2, dtype=float)
    if isinstance(model, PowerVariogram):
        gamma = power_variogram(lag, model)
    else:
        i = COMPONENT_INDEX[components[0]]
        j = COMPONENT_INDEX[components[1]]
        gamma = cross_variogram(lag, model)[i, j]
    return float(2.0 * special.ndtr(math.sqrt(gamma / 2.0)))
