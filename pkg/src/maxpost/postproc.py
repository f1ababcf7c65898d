"""Ensemble-based normalization of raw maxima and the three-step
post-processing that turns a forecast field into calibrated samples of the
observed maximum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .condsim import ConditionalSampler
from .margins import GevParams, StationMargins, from_gumbel, to_gumbel
from .variogram import CrossVariogram

S_FLOOR_DEFAULT = 1e-6

# Gumbel-scale clamp for forecasts falling outside the fitted support.
_CLAMP_P_LO = 1e-6
_GUMBEL_LO = -math.log(-math.log(_CLAMP_P_LO))
_GUMBEL_HI = -math.log(-math.log(1.0 - _CLAMP_P_LO))


@dataclass(frozen=True)
class EnsemblePanel:
    """Per (station, period) ensemble of hourly mean winds and member maxima."""

    means: np.ndarray   # (n_stations, n_periods, n_members, n_hours), m/s
    maxima: np.ndarray  # (n_stations, n_periods, n_members), m/s

    def __post_init__(self):
        if self.means.ndim != 4 or self.maxima.ndim != 3:
            raise ValueError("means must be 4-d, maxima 3-d")
        if self.means.shape[:3] != self.maxima.shape:
            raise ValueError("means and maxima shapes are inconsistent")
        if self.n_members < 2 or self.n_hours < 1:
            raise ValueError("need at least 2 members and 1 hour")
        if np.any(self.means < 0) or np.any(self.maxima < 0):
            raise ValueError("wind values must be nonnegative")

    @property
    def n_members(self) -> int:
        return self.means.shape[2]

    @property
    def n_hours(self) -> int:
        return self.means.shape[3]


@dataclass(frozen=True)
class Normalization:
    """Per (station, period) location/scale normalizers derived from the ensemble."""

    m: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if self.m.shape != self.s.shape:
            raise ValueError("m and s must have the same shape")
        if not np.all(np.isfinite(self.m)):
            raise ValueError("normalization locations must be finite")
        if np.any(self.s <= 0):
            raise ValueError("normalization scales must be positive")


@dataclass(frozen=True)
class MaximaPanel:
    """Observed and forecasted station maxima with planar coordinates."""

    station_ids: tuple
    coords: np.ndarray        # (n_stations, 2), km
    periods: tuple
    blocks: tuple             # block (month) label per period
    v_obs: np.ndarray         # (n_stations, n_periods), m/s
    v_pred: np.ndarray
    mask: np.ndarray          # True marks a missing observation

    def __post_init__(self):
        n_l, n_p = self.v_obs.shape
        if len(self.station_ids) != n_l or self.coords.shape != (n_l, 2):
            raise ValueError("station metadata inconsistent with value matrix")
        if len(self.periods) != n_p or len(self.blocks) != n_p:
            raise ValueError("period metadata inconsistent with value matrix")
        if self.v_pred.shape != (n_l, n_p) or self.mask.shape != (n_l, n_p):
            raise ValueError("panel matrices must share one shape")
        d = self.coords[:, None, :] - self.coords[None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        np.fill_diagonal(dist, np.inf)
        if np.min(dist) <= 0:
            raise ValueError("station coordinates must be distinct")
        good = ~self.mask
        if np.any(self.v_obs[good] < 0) or np.any(self.v_pred[good] < 0):
            raise ValueError("nonmissing maxima must be nonnegative")

    @property
    def n_stations(self) -> int:
        return self.v_obs.shape[0]

    @property
    def n_periods(self) -> int:
        return self.v_obs.shape[1]


def ensemble_normalization(e: EnsemblePanel, s_floor: float = S_FLOOR_DEFAULT) -> Normalization:
    """Normalizers from the ensemble of hourly means.

    The location is the largest member-wise time average; the scale is the
    root mean square deviation of all member-hours from it (divisor
    n_members * n_hours - 1), floored at ``s_floor``.
    """
    denom = e.n_members * e.n_hours - 1
    if denom < 1:
        raise ValueError("ensemble too small for a spread estimate")
    member_means = e.means.mean(axis=3)
    m = member_means.max(axis=2)
    dev = e.means - m[:, :, None, None]
    s = np.sqrt(np.sum(dev * dev, axis=(2, 3)) / denom)
    return Normalization(m=m, s=np.maximum(s, s_floor))


def ensemble_max_forecast(e: EnsemblePanel) -> np.ndarray:
    """Member-wise maximum of the forecast maxima, per (station, period)."""
    return e.maxima.max(axis=2)


def standardize(values: np.ndarray, norm: Normalization,
                mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Entrywise (v - m) / s; missing entries propagate as NaN."""
    values = np.asarray(values, dtype=float)
    if values.shape != norm.m.shape:
        raise ValueError("normalization does not cover the panel")
    out = (values - norm.m) / norm.s
    if mask is not None:
        if np.any(~np.isfinite(out[~mask])):
            raise ValueError("missing normalization entry for a nonmissing value")
        out = np.where(mask, np.nan, out)
    elif np.any(~np.isfinite(out)):
        raise ValueError("missing normalization entry")
    return out


def station_params(margins: StationMargins, i: int) -> GevParams:
    """GEV parameters of one station on the standardized scale."""
    return GevParams(margins.shape, float(margins.loc[i]), float(margins.scale[i]))


@dataclass(frozen=True)
class PostprocessResult:
    """K post-processed fields (m/s) plus a support-clamp report."""

    fields: np.ndarray            # (n_draws, n_targets)
    n_clamped: int
    clamped_sites: tuple


def forecast_to_gumbel(
    forecast: np.ndarray,
    m: np.ndarray,
    s: np.ndarray,
    params: Sequence[GevParams],
) -> tuple[np.ndarray, list[int]]:
    """Step 1: map raw forecasts onto the Gumbel scale, clamping support
    violations to the 1e-6 / 1-1e-6 endpoint quantiles."""
    forecast = np.asarray(forecast, dtype=float)
    out = np.empty_like(forecast)
    clamped = []
    for i, p in enumerate(params):
        try:
            x = to_gumbel(float(forecast[i]), float(m[i]), float(s[i]), p)
        except ValueError:
            x = _GUMBEL_LO if p.shape > 0 else _GUMBEL_HI
            clamped.append(i)
        else:
            if x < _GUMBEL_LO or x > _GUMBEL_HI:
                x = float(np.clip(x, _GUMBEL_LO, _GUMBEL_HI))
                clamped.append(i)
        out[i] = x
    return out, clamped


def postprocess(
    forecast,
    cond_sites,
    cond_norm: tuple[np.ndarray, np.ndarray],
    pred_params: Sequence[GevParams],
    target_sites,
    target_norm: tuple[np.ndarray, np.ndarray],
    obs_params: Sequence[GevParams],
    model: CrossVariogram,
    n_draws: int,
    seed,
    sampler: Optional[ConditionalSampler] = None,
    **sampler_options,
) -> PostprocessResult:
    """Three-step post-processing of one forecast field.

    Step 1 transforms the forecast maxima at the conditioning sites to the
    Gumbel scale with the forecast margins, step 2 simulates the observed
    component conditionally on them, and step 3 maps the draws back to m/s
    with the observation margins at the target sites.
    """
    forecast = np.asarray(forecast, dtype=float)
    cond_sites = np.asarray(cond_sites, dtype=float).reshape(-1, 2)
    target_sites = np.asarray(target_sites, dtype=float).reshape(-1, 2)
    if len(forecast) != len(cond_sites) or len(pred_params) != len(cond_sites):
        raise ValueError("forecast values, sites and margins must align")
    if len(obs_params) != len(target_sites):
        raise ValueError("target margins must align with target sites")

    x_pred, clamped = forecast_to_gumbel(forecast, cond_norm[0], cond_norm[1], pred_params)
    if sampler is None:
        sampler = ConditionalSampler(model, cond_sites, target_sites, **sampler_options)
    x_obs = sampler.sample(x_pred, n_draws, seed)

    fields = np.empty_like(x_obs)
    tm, ts = np.asarray(target_norm[0], dtype=float), np.asarray(target_norm[1], dtype=float)
    for j, p in enumerate(obs_params):
        fields[:, j] = from_gumbel(x_obs[:, j], float(tm[j]), float(ts[j]), p)
    return PostprocessResult(fields=fields, n_clamped=len(clamped), clamped_sites=tuple(clamped))
