"""Parametric (cross-)variogram families with geometric anisotropy.

The univariate family is a power variogram of the anisotropic distance.
The bivariate family combines a shared smooth long-range component with a
parsimonious bivariate Matérn short-range part plus a spatially constant
effect in the second (forecast) component.  Component order is fixed:
index 0 = observed variable, index 1 = forecast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

OBS = "obs"
PRED = "pred"
COMPONENT_INDEX = {OBS: 0, PRED: 1}


@dataclass(frozen=True)
class Anisotropy:
    """Geometric (elliptical) anisotropy: axis ratio and rotation angle."""

    ratio: float = 1.0
    angle: float = 0.0

    def __post_init__(self):
        if self.ratio <= 0:
            raise ValueError(f"axis ratio must be positive, got {self.ratio}")
        if not (-math.pi / 4 < self.angle <= math.pi / 4):
            raise ValueError("rotation angle must lie in (-pi/4, pi/4]")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, s], [-self.ratio * s, self.ratio * c]])


def aniso_norm(h, aniso: Anisotropy):
    """Anisotropic norm ||A h|| for 2-vectors (vectorized over leading axes)."""
    h = np.asarray(h, dtype=float)
    ah = h @ aniso.matrix.T
    out = np.sqrt(np.sum(ah * ah, axis=-1))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PowerVariogram:
    """Univariate variogram (scale * ||A h||)^exponent, exponent in (0, 2]."""

    scale: float
    aniso: Anisotropy = Anisotropy()
    exponent: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not (0 < self.exponent <= 2):
            raise ValueError(f"exponent must lie in (0, 2], got {self.exponent}")


def power_variogram(h, p: PowerVariogram):
    """Evaluate the univariate variogram at lag(s) h."""
    r = aniso_norm(h, p.aniso)
    return (p.scale * r) ** p.exponent


def matern_correlation(r, nu: float, a: float):
    """Matérn correlation 2^{1-nu}/Gamma(nu) (a r)^nu K_nu(a r), equal to 1 at r=0.

    Evaluated in log space with the exponentially scaled Bessel function so
    large orders and large arguments do not underflow prematurely.
    """
    if nu <= 0 or a <= 0:
        raise ValueError("Matérn smoothness and scale must be positive")
    r = np.asarray(r, dtype=float)
    x = a * r
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        log_kve = np.log(special.kve(nu, xs))
        logval = (1 - nu) * math.log(2) - special.gammaln(nu) + nu * np.log(xs) + log_kve - xs
    out = np.where(pos, np.exp(logval), 1.0)
    out = np.where(np.isfinite(out), out, 0.0)  # deep-tail underflow of kve
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CrossVariogram:
    """Pseudo cross-variogram of the joint (observed, forecast) field.

    Twelve parameters: a common long-range part with sill ``sigma``, scale
    ``kappa`` and exponent ``beta``; shared geometric anisotropy; Matérn
    amplitudes/smoothnesses per component with joint scale ``a``; colocated
    correlation ``rho``; and a constant effect ``c`` on the forecast
    component.  Validity is checked by :func:`validate_cross_params`.
    """

    sigma: float
    kappa: float
    aniso: Anisotropy
    beta: float
    c: float
    sigma1: float
    nu1: float
    sigma2: float
    nu2: float
    a: float
    rho: float

    @property
    def nu12(self) -> float:
        return 0.5 * (self.nu1 + self.nu2)

    @property
    def rho_bound(self) -> float:
        return 2.0 * math.sqrt(self.nu1 * self.nu2) / (self.nu1 + self.nu2)


def validate_cross_params(p: CrossVariogram) -> Optional[str]:
    """Return None if the parameters are valid, else the first violated constraint."""
    if not all(
        np.isfinite(v)
        for v in (p.sigma, p.kappa, p.beta, p.c, p.sigma1, p.nu1, p.sigma2, p.nu2, p.a, p.rho)
    ):
        return "parameters must be finite"
    if p.sigma <= 0:
        return f"sigma must be positive, got {p.sigma}"
    if p.kappa <= 0:
        return f"kappa must be positive, got {p.kappa}"
    if p.a <= 0:
        return f"a must be positive, got {p.a}"
    if not (0 < p.beta < 1):
        return f"beta must lie in the open interval (0, 1), got {p.beta}"
    if p.c < 0:
        return f"c must be nonnegative, got {p.c}"
    if p.sigma1 < 0:
        return f"sigma1 must be nonnegative, got {p.sigma1}"
    if p.sigma2 < 0:
        return f"sigma2 must be nonnegative, got {p.sigma2}"
    if p.nu1 <= 0:
        return f"nu1 must be positive, got {p.nu1}"
    if p.nu2 <= 0:
        return f"nu2 must be positive, got {p.nu2}"
    bound = p.rho_bound
    if abs(p.rho) > bound:
        return f"|rho| = {abs(p.rho)} exceeds the Matérn validity bound {bound}"
    return None


def common_variogram(h, p: CrossVariogram):
    """Long-range component sigma^2 (kappa r)^2 / ((kappa r)^2 + 1)^beta."""
    r = aniso_norm(h, p.aniso)
    kr2 = (p.kappa * r) ** 2
    return p.sigma**2 * kr2 / (kr2 + 1.0) ** p.beta


def cross_variogram(h, p: CrossVariogram):
    """Evaluate the 2x2 pseudo cross-variogram matrix at lag(s) h.

    Returns an array of shape ``h.shape[:-1] + (2, 2)``; the matrix is
    symmetric and its diagonal vanishes at h = 0.
    """
    msg = validate_cross_params(p)
    if msg is not None:
        raise ValueError(f"invalid cross-variogram parameters: {msg}")
    h = np.asarray(h, dtype=float)
    r = np.asarray(aniso_norm(h, p.aniso))
    g0 = np.asarray(common_variogram(h, p))
    m1 = np.asarray(matern_correlation(r, p.nu1, p.a))
    m2 = np.asarray(matern_correlation(r, p.nu2, p.a))
    m12 = np.asarray(matern_correlation(r, p.nu12, p.a))
    g11 = g0 + p.sigma1**2 * (1.0 - m1)
    g22 = g0 + p.sigma2**2 * (1.0 - m2)
    g12 = g0 + 0.5 * (p.sigma1**2 + p.c**2 + p.sigma2**2) - p.rho * p.sigma1 * p.sigma2 * m12
    out = np.empty(r.shape + (2, 2))
    out[..., 0, 0] = g11
    out[..., 1, 1] = g22
    out[..., 0, 1] = g12
    out[..., 1, 0] = g12
    return out


def cross_variogram_entry(h, p: CrossVariogram, comps: tuple[str, str]):
    """One entry of the cross-variogram, selected by component tags."""
    i = COMPONENT_INDEX[comps[0]]
    j = COMPONENT_INDEX[comps[1]]
    return cross_variogram(h, p)[..., i, j]


def bound_excess(p: CrossVariogram, grid) -> float:
    """Largest violation of the square-root bounds valid cross-variograms obey.

    Any translation-invariant pseudo cross-variogram satisfies, for every
    lag h, (sqrt(g11) - sqrt(g22))^2 <= 4 g12(0) and
    (sqrt(gii) - sqrt(g12))^2 <= g12(0).  Returns the largest positive
    excess over the grid (0 if none), a numerical self-check of validity.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    g = cross_variogram(grid, p)
    g11 = np.sqrt(g[:, 0, 0])
    g22 = np.sqrt(g[:, 1, 1])
    g12 = np.sqrt(g[:, 0, 1])
    g12_zero = float(cross_variogram(np.zeros(2), p)[0, 1])
    excess = np.concatenate(
        [
            (g11 - g22) ** 2 - 4.0 * g12_zero,
            (g11 - g12) ** 2 - g12_zero,
            (g22 - g12) ** 2 - g12_zero,
        ]
    )
    return float(max(np.max(excess), 0.0))
