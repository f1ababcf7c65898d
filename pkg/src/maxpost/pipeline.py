"""Shared fitting and post-processing orchestration used by the scoring
module and the command-line driver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .condsim import ConditionalSampler
from .depfit import (
    BIVARIATE,
    FitResult,
    ThetaEstimate,
    default_starts,
    estimate_thetas,
    fit_dependence,
)
from .margins import (
    GumbelPanel,
    StationGevFit,
    StationMargins,
    fit_gev_mle,
    gumbel_panel,
    ks_test_gumbel,
    spatial_constancy_test,
)
from .maxstable import _seedseq
from .postproc import (
    EnsemblePanel,
    MaximaPanel,
    Normalization,
    ensemble_normalization,
    postprocess,
    station_params,
)
from .variogram import CrossVariogram, OBS, PRED


@dataclass(frozen=True)
class PipelineConfig:
    """Tuning knobs of the full fit/score pipeline (all deterministic)."""

    model_kind: str = BIVARIATE
    n_draws: int = 50              # post-processing sample size K
    chi: float = 1.0
    s_floor: float = 1e-6
    fit_starts: int = 20
    fit_maxiter: int = 4000
    cv_fit_starts: int = 2
    cv_fit_maxiter: int = 800
    n_cond_neighbors: int = 2      # conditioning: own site plus this many nearest
    es_pairs: int = 0
    es_br_samples: int = 500
    es_ind_samples: int = 50
    exact_partition_limit: int = 6
    gibbs_sweeps: int = 200
    rejection_budget: int = 100_000
    n_rep: int = 100               # replicates for the simulate command


@dataclass(frozen=True)
class MarginsBundle:
    """Everything the marginal fitting stage produces."""

    norm: Normalization
    y_obs: np.ndarray
    y_pred: np.ndarray
    free_fits_obs: tuple
    free_fits_pred: tuple
    obs_margins: StationMargins
    pred_margins: StationMargins
    gumbel_obs: GumbelPanel
    gumbel_pred: GumbelPanel
    constancy: dict      # (tag, parameter) -> KS p-value
    ks_pvalues: dict     # tag -> per-station goodness-of-fit p-values


def _fit_stations(
    y: np.ndarray, mask: np.ndarray, station_ids, fixed_shape: Optional[float]
) -> list[StationGevFit]:
    fits = []
    for i, sid in enumerate(station_ids):
        row = y[i][~mask[i]]
        fits.append(fit_gev_mle(row, fixed_shape=fixed_shape, station=str(sid)))
    return fits


def fit_margins_pipeline(
    panel: MaximaPanel, ensembles: EnsemblePanel, config: PipelineConfig
) -> MarginsBundle:
    """Normalize by the ensemble, fit per-station GEVs, pool the shape,
    refit with the common shape and transform to Gumbel margins."""
    from .postproc import standardize

    norm = ensemble_normalization(ensembles, config.s_floor)
    y_obs = standardize(panel.v_obs, norm, panel.mask)
    y_pred = standardize(panel.v_pred, norm, panel.mask)

    out: dict[str, tuple] = {}
    constancy: dict[tuple, float] = {}
    ks_pvalues: dict[str, np.ndarray] = {}
    for tag, y in ((OBS, y_obs), (PRED, y_pred)):
        free = _fit_stations(y, panel.mask, panel.station_ids, None)
        for which in ("shape", "loc", "scale"):
            try:
                _, pval = spatial_constancy_test(free, which)
            except ValueError:
                pval = float("nan")
            constancy[(tag, which)] = pval
        shape_bar = float(np.mean([f.params.shape for f in free]))
        fixed = _fit_stations(y, panel.mask, panel.station_ids, shape_bar)
        margins = StationMargins(
            tag=tag,
            shape=shape_bar,
            loc=np.array([f.params.loc for f in fixed]),
            scale=np.array([f.params.scale for f in fixed]),
        )
        gp = gumbel_panel(y, margins, panel.mask)
        pvals = np.empty(panel.n_stations)
        for i in range(panel.n_stations):
            row = gp.values[i][~panel.mask[i]]
            pvals[i] = ks_test_gumbel(row)[1]
        ks_pvalues[tag] = pvals
        out[tag] = (free, margins, gp)

    return MarginsBundle(
        norm=norm,
        y_obs=y_obs,
        y_pred=y_pred,
        free_fits_obs=tuple(out[OBS][0]),
        free_fits_pred=tuple(out[PRED][0]),
        obs_margins=out[OBS][1],
        pred_margins=out[PRED][1],
        gumbel_obs=out[OBS][2],
        gumbel_pred=out[PRED][2],
        constancy=constancy,
        ks_pvalues=ks_pvalues,
    )


def fit_dependence_pipeline(
    panel: MaximaPanel,
    margins: MarginsBundle,
    config: PipelineConfig,
    seed=0,
    extra_starts: Optional[Sequence] = None,
) -> tuple[FitResult, list[ThetaEstimate]]:
    """Estimate pairwise extremal coefficients and fit the dependence model."""
    panels = {OBS: margins.gumbel_obs.values}
    if config.model_kind == BIVARIATE:
        panels[PRED] = margins.gumbel_pred.values
    estimates = estimate_thetas(
        panels, panel.coords, panel.blocks, config.model_kind, mask=panel.mask
    )
    seed_int = seed if isinstance(seed, int) else 0
    starts = list(
        default_starts(
            [e for e in estimates if e.variance > 0] or estimates,
            config.model_kind,
            n_starts=config.fit_starts,
            seed=seed_int,
        )
    )
    if extra_starts:
        starts = list(extra_starts) + starts
    fit = fit_dependence(
        estimates, config.model_kind, starts=starts, maxiter=config.fit_maxiter
    )
    return fit, estimates


def neighborhoods(coords: np.ndarray, n_neighbors: int) -> list[np.ndarray]:
    """Conditioning sets per station: the station itself plus its nearest
    neighbors (by planar distance), mirroring the small-neighborhood
    strategy used for tractable conditional simulation."""
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    take = min(n_neighbors, n - 1)
    out = []
    d = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=-1))
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        nb = [i] + [int(j) for j in order if j != i][:take]
        out.append(np.asarray(nb, dtype=int))
    return out


def postprocess_panel(
    panel: MaximaPanel,
    ensembles: EnsemblePanel,
    norm: Normalization,
    obs_margins: StationMargins,
    pred_margins: StationMargins,
    model: CrossVariogram,
    config: PipelineConfig,
    seed,
) -> tuple[np.ndarray, int]:
    """Post-process every (station, period) cell of the panel.

    Each station is treated as a single target conditioned on the forecast
    at itself and its nearest neighbors; geometry-dependent factorizations
    are shared across periods.  Returns (fields, n_clamped) with fields of
    shape (n_draws, n_stations, n_periods) in m/s; entries at missing
    observations are still filled (the forecast side is dense).
    """
    n_l, n_p = panel.n_stations, panel.n_periods
    fields = np.empty((config.n_draws, n_l, n_p))
    nbhd = neighborhoods(panel.coords, config.n_cond_neighbors)
    station_seeds = _seedseq(seed).spawn(n_l)
    n_clamped = 0
    for i in range(n_l):
        nb = nbhd[i]
        sampler = ConditionalSampler(
            model,
            panel.coords[nb],
            panel.coords[[i]],
            exact_partition_limit=config.exact_partition_limit,
            gibbs_sweeps=config.gibbs_sweeps,
            rejection_budget=config.rejection_budget,
        )
        pred_params = [station_params(pred_margins, int(j)) for j in nb]
        obs_p = [station_params(obs_margins, i)]
        period_seeds = station_seeds[i].spawn(n_p)
        for p in range(n_p):
            res = postprocess(
                forecast=panel.v_pred[nb, p],
                cond_sites=panel.coords[nb],
                cond_norm=(norm.m[nb, p], norm.s[nb, p]),
                pred_params=pred_params,
                target_sites=panel.coords[[i]],
                target_norm=(norm.m[[i], p], norm.s[[i], p]),
                obs_params=obs_p,
                model=model,
                n_draws=config.n_draws,
                seed=period_seeds[p],
                sampler=sampler,
            )
            fields[:, i, p] = res.fields[:, 0]
            n_clamped += res.n_clamped
    return fields, n_clamped


def panel_subset(panel: MaximaPanel, period_idx: np.ndarray) -> MaximaPanel:
    """Restrict a panel to a subset of periods (for blockwise refits)."""
    period_idx = np.asarray(period_idx, dtype=int)
    return MaximaPanel(
        station_ids=panel.station_ids,
        coords=panel.coords,
        periods=tuple(panel.periods[p] for p in period_idx),
        blocks=tuple(panel.blocks[p] for p in period_idx),
        v_obs=panel.v_obs[:, period_idx],
        v_pred=panel.v_pred[:, period_idx],
        mask=panel.mask[:, period_idx],
    )


def ensemble_subset(ensembles: EnsemblePanel, period_idx: np.ndarray) -> EnsemblePanel:
    period_idx = np.asarray(period_idx, dtype=int)
    return EnsemblePanel(
        means=ensembles.means[:, period_idx],
        maxima=ensembles.maxima[:, period_idx],
    )
