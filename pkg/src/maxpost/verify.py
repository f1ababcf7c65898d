"""Proper scoring of the fitted models: empirical CRPS, energy score,
skill scores, whole-model score reports and monthly cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .margins import GevParams, StationMargins, crps_gev, from_gumbel
from .maxstable import simulate_brown_resnick_panel, _seedseq, _tagged_child
from .postproc import (
    EnsemblePanel,
    MaximaPanel,
    Normalization,
    ensemble_normalization,
)
from .variogram import CrossVariogram, PowerVariogram


def energy_score(samples, x, chi: float = 1.0) -> float:
    """Plug-in energy score of a sample forecast against one observation.

    (1/K) sum ||y_k - x||^chi - 1/(2 K^2) sum_ij ||y_i - y_j||^chi with the
    Euclidean norm; chi must lie in (0, 2).
    """
    if not 0 < chi < 2:
        raise ValueError("energy-score exponent must lie in (0, 2)")
    y = np.asarray(samples, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    if y.shape[0] == 0:
        raise ValueError("sample set is empty")
    if y.shape[1] != xv.size:
        raise ValueError("sample dimension does not match the observation")
    d_obs = np.sqrt(np.sum((y - xv[None, :]) ** 2, axis=1))
    diff = y[:, None, :] - y[None, :, :]
    d_pair = np.sqrt(np.sum(diff * diff, axis=2))
    k = y.shape[0]
    return float(np.sum(d_obs**chi) / k - np.sum(d_pair**chi) / (2 * k * k))


def crps_empirical(samples, x) -> float:
    """Plug-in CRPS of an ensemble: the one-dimensional energy score."""
    y = np.asarray(samples, dtype=float).reshape(-1, 1)
    return energy_score(y, [float(x)], 1.0)


def skill_score(score: float, reference: float) -> float:
    """1 - score/reference; positive means better than the reference."""
    if reference <= 0:
        raise ValueError("reference score must be positive")
    return 1.0 - score / reference


@dataclass(frozen=True)
class PairEnergyScores:
    i: int
    j: int
    es_br: float
    es_ind: float


@dataclass(frozen=True)
class ScoreReport:
    """Per-station and aggregate scores of the fitted forecast models."""

    station_ids: tuple
    n_periods_scored: np.ndarray
    crps_obs: np.ndarray
    crps_pred: np.ndarray
    crps_orig: np.ndarray
    crps_biv: Optional[np.ndarray]
    skill_gev_vs_pred: float          # paper-style S: GEV(obs) vs GEV(pred)
    skill_gev_vs_ensemble: float      # paper-style S-tilde: GEV(obs) vs raw ensemble
    skill_pp_vs_ensemble: Optional[float]  # post-processed vs raw ensemble
    pair_scores: tuple = ()
    seed: Optional[int] = None
    n_draws: int = 0
    block: str = ""


def _station_gev_crps(
    panel: MaximaPanel, norm: Normalization, margins: StationMargins
) -> np.ndarray:
    """Per-station mean CRPS of the composed GEV forecast for the maxima."""
    out = np.full(panel.n_stations, np.nan)
    for i in range(panel.n_stations):
        ok = ~panel.mask[i]
        if not ok.any():
            continue
        vals = []
        for p in np.where(ok)[0]:
            params = GevParams(
                margins.shape,
                float(norm.m[i, p] + norm.s[i, p] * margins.loc[i]),
                float(norm.s[i, p] * margins.scale[i]),
            )
            vals.append(crps_gev(params, float(panel.v_obs[i, p])))
        out[i] = float(np.mean(vals))
    return out


def _station_ensemble_crps(panel: MaximaPanel, ensembles: EnsemblePanel) -> np.ndarray:
    out = np.full(panel.n_stations, np.nan)
    for i in range(panel.n_stations):
        ok = ~panel.mask[i]
        if not ok.any():
            continue
        vals = [
            crps_empirical(ensembles.maxima[i, p], float(panel.v_obs[i, p]))
            for p in np.where(ok)[0]
        ]
        out[i] = float(np.mean(vals))
    return out


def _station_sample_crps(
    panel: MaximaPanel, fields: np.ndarray
) -> np.ndarray:
    """CRPS of per-(station, period) sample forecasts, shape (K, n_l, n_p)."""
    out = np.full(panel.n_stations, np.nan)
    for i in range(panel.n_stations):
        ok = ~panel.mask[i]
        if not ok.any():
            continue
        vals = [
            crps_empirical(fields[:, i, p], float(panel.v_obs[i, p]))
            for p in np.where(ok)[0]
        ]
        out[i] = float(np.mean(vals))
    return out


def _pair_energy_scores(
    panel: MaximaPanel,
    norm: Normalization,
    obs_margins: StationMargins,
    univ_model: PowerVariogram,
    pairs: Sequence[tuple[int, int]],
    n_br: int,
    n_ind: int,
    seed,
) -> list[PairEnergyScores]:
    """Mean pairwise energy scores: fitted max-stable model vs independence."""
    rng_seq = _seedseq(seed).spawn(len(pairs))
    out = []
    for (i, j), child in zip(pairs, rng_seq):
        sub = child.spawn(2)
        gum = simulate_brown_resnick_panel(
            panel.coords[[i, j]], univ_model, n_br, seed=sub[0]
        )[:, 0, :]  # (n_br, 2)
        rng = np.random.Generator(np.random.PCG64(sub[1]))
        u = rng.uniform(size=(n_ind, 2))
        gum_ind = -np.log(-np.log(u))
        ok = (~panel.mask[i]) & (~panel.mask[j])
        es_br, es_ind = [], []
        pi = GevParams(obs_margins.shape, float(obs_margins.loc[i]), float(obs_margins.scale[i]))
        pj = GevParams(obs_margins.shape, float(obs_margins.loc[j]), float(obs_margins.scale[j]))
        for p in np.where(ok)[0]:
            obs_vec = np.array([panel.v_obs[i, p], panel.v_obs[j, p]])
            y_br = np.column_stack(
                [
                    from_gumbel(gum[:, 0], norm.m[i, p], norm.s[i, p], pi),
                    from_gumbel(gum[:, 1], norm.m[j, p], norm.s[j, p], pj),
                ]
            )
            y_ind = np.column_stack(
                [
                    from_gumbel(gum_ind[:, 0], norm.m[i, p], norm.s[i, p], pi),
                    from_gumbel(gum_ind[:, 1], norm.m[j, p], norm.s[j, p], pj),
                ]
            )
            es_br.append(energy_score(y_br, obs_vec))
            es_ind.append(energy_score(y_ind, obs_vec))
        out.append(
            PairEnergyScores(i=i, j=j, es_br=float(np.mean(es_br)), es_ind=float(np.mean(es_ind)))
        )
    return out


def _aggregate_skill(score: np.ndarray, reference: np.ndarray) -> float:
    ok = np.isfinite(score) & np.isfinite(reference)
    return skill_score(float(np.sum(score[ok])), float(np.sum(reference[ok])))


def score_models(
    panel: MaximaPanel,
    ensembles: EnsemblePanel,
    obs_margins: StationMargins,
    pred_margins: StationMargins,
    model: Optional[CrossVariogram],
    config,
    seed,
    pp_fields: Optional[np.ndarray] = None,
    univ_model: Optional[PowerVariogram] = None,
    block: str = "",
) -> ScoreReport:
    """Score the marginal, raw-ensemble and post-processed forecasts.

    ``pp_fields`` holds pre-computed post-processed samples of shape
    (n_draws, n_stations, n_periods); if absent and ``model`` is given they
    are generated here via the conditional-simulation pipeline.
    """
    from .pipeline import postprocess_panel  # deferred to avoid an import cycle

    norm = ensemble_normalization(ensembles, config.s_floor)
    crps_obs = _station_gev_crps(panel, norm, obs_margins)
    crps_pred = _station_gev_crps(panel, norm, pred_margins)
    crps_orig = _station_ensemble_crps(panel, ensembles)

    crps_biv = None
    skill_pp = None
    n_draws = 0
    if model is not None:
        if pp_fields is None:
            pp_fields, _ = postprocess_panel(
                panel, ensembles, norm, obs_margins, pred_margins, model, config, seed
            )
        n_draws = pp_fields.shape[0]
        crps_biv = _station_sample_crps(panel, pp_fields)
        skill_pp = _aggregate_skill(crps_biv, crps_orig)

    pair_scores: list[PairEnergyScores] = []
    if univ_model is not None and config.es_pairs > 0:
        es_seed = _tagged_child(seed, 1)
        rng = np.random.Generator(np.random.PCG64(es_seed.spawn(1)[0]))
        all_pairs = [(i, j) for i in range(panel.n_stations) for j in range(i + 1, panel.n_stations)]
        take = min(config.es_pairs, len(all_pairs))
        idx = rng.choice(len(all_pairs), size=take, replace=False)
        pairs = [all_pairs[t] for t in sorted(idx)]
        pair_scores = _pair_energy_scores(
            panel, norm, obs_margins, univ_model, pairs,
            config.es_br_samples, config.es_ind_samples, es_seed,
        )

    return ScoreReport(
        station_ids=panel.station_ids,
        n_periods_scored=np.sum(~panel.mask, axis=1),
        crps_obs=crps_obs,
        crps_pred=crps_pred,
        crps_orig=crps_orig,
        crps_biv=crps_biv,
        skill_gev_vs_pred=_aggregate_skill(crps_obs, crps_pred),
        skill_gev_vs_ensemble=_aggregate_skill(crps_obs, crps_orig),
        skill_pp_vs_ensemble=skill_pp,
        pair_scores=tuple(pair_scores),
        seed=seed if isinstance(seed, int) else None,
        n_draws=n_draws,
        block=block,
    )


def combine_reports(reports: Sequence[ScoreReport]) -> dict:
    """Pool per-block reports into overall cross-validated skill scores."""
    def total(attr):
        vals = []
        for r in reports:
            arr = getattr(r, attr)
            if arr is None:
                return None
            weights = r.n_periods_scored
            ok = np.isfinite(arr)
            vals.append(np.sum(arr[ok] * weights[ok]))
        return float(np.sum(vals))

    out = {}
    t_obs, t_pred, t_orig = total("crps_obs"), total("crps_pred"), total("crps_orig")
    out["skill_gev_vs_pred"] = skill_score(t_obs, t_pred)
    out["skill_gev_vs_ensemble"] = skill_score(t_obs, t_orig)
    t_biv = total("crps_biv")
    out["skill_pp_vs_ensemble"] = None if t_biv is None else skill_score(t_biv, t_orig)
    return out


def cross_validate(
    panel: MaximaPanel,
    ensembles: EnsemblePanel,
    config,
    seed,
    warm_start=None,
) -> list[ScoreReport]:
    """Leave-one-block-out refit and scoring.

    For every block (month) label, all parameters (margins and dependence)
    are re-estimated on the other blocks and the held-out block is scored
    with them.  Returns one report per block, in label order.  A full-data
    dependence fit seeds each fold; pass ``warm_start`` (a fitted parameter
    object) to reuse one computed elsewhere.
    """
    from .pipeline import (
        fit_dependence_pipeline,
        fit_margins_pipeline,
        panel_subset,
        ensemble_subset,
    )

    labels = np.asarray(panel.blocks)
    uniq = list(dict.fromkeys(panel.blocks))  # stable order of appearance
    if len(uniq) < 2:
        raise ValueError("cross-validation needs at least 2 blocks")

    # Warm starts: the full-data fit seeds each fold's dependence fit.
    if warm_start is None:
        full_margins = fit_margins_pipeline(panel, ensembles, config)
        full_fit, _ = fit_dependence_pipeline(panel, full_margins, config, seed=seed)
        warm_params = full_fit.params
    else:
        warm_params = warm_start

    reports = []
    children = _seedseq(seed).spawn(len(uniq))
    for lab, child in zip(uniq, children):
        test_idx = np.where(labels == lab)[0]
        train_idx = np.where(labels != lab)[0]
        if train_idx.size < 2 or test_idx.size < 1:
            raise ValueError(f"block {lab!r} leaves too little data to fit or score")
        train_panel = panel_subset(panel, train_idx)
        train_ens = ensemble_subset(ensembles, train_idx)
        test_panel = panel_subset(panel, test_idx)
        test_ens = ensemble_subset(ensembles, test_idx)

        margins = fit_margins_pipeline(train_panel, train_ens, config)
        cv_config = replace(
            config,
            fit_starts=config.cv_fit_starts,
            fit_maxiter=config.cv_fit_maxiter,
        )
        fit, _ = fit_dependence_pipeline(
            train_panel, margins, cv_config, seed=child, extra_starts=[warm_params]
        )
        model = fit.params if isinstance(fit.params, CrossVariogram) else None
        univ = fit.params if isinstance(fit.params, PowerVariogram) else None
        reports.append(
            score_models(
                test_panel,
                test_ens,
                margins.obs_margins,
                margins.pred_margins,
                model,
                config,
                child.spawn(1)[0],
                univ_model=univ,
                block=str(lab),
            )
        )
    return reports
