"""Shared fixtures: synthetic observation/forecast worlds with known truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from maxpost.margins import GevParams, StationMargins, from_gumbel
from maxpost.maxstable import simulate_brown_resnick_panel
from maxpost.postproc import (
    EnsemblePanel,
    MaximaPanel,
    Normalization,
    ensemble_max_forecast,
    ensemble_normalization,
)
from maxpost.variogram import Anisotropy, CrossVariogram, OBS, PRED


@dataclass
class SyntheticWorld:
    """A data set generated from a known joint model, with the truth kept."""

    panel: MaximaPanel
    ensembles: EnsemblePanel
    model: CrossVariogram
    obs_margins: StationMargins
    pred_margins: StationMargins
    norm: Normalization
    gumbel_fields: np.ndarray  # (n_periods, 2, n_stations)


DEFAULT_MODEL = CrossVariogram(
    sigma=1.2,
    kappa=0.012,
    aniso=Anisotropy(1.2, 0.2),
    beta=0.5,
    c=0.3,
    sigma1=0.7,
    nu1=0.8,
    sigma2=0.9,
    nu2=1.4,
    a=0.03,
    rho=0.6,
)


def station_grid(n_stations: int, rng: np.random.Generator) -> np.ndarray:
    """Flat-region station layout, roughly 450 x 300 km."""
    return np.column_stack(
        [rng.uniform(0.0, 450.0, n_stations), rng.uniform(0.0, 300.0, n_stations)]
    )


def make_world(
    n_stations: int = 12,
    n_periods: int = 120,
    n_members: int = 8,
    n_hours: int = 5,
    seed: int = 2026,
    model: CrossVariogram = DEFAULT_MODEL,
    block_length: int = 30,
    missing_frac: float = 0.0,
) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    coords = station_grid(n_stations, rng)

    fields = simulate_brown_resnick_panel(coords, model, n_periods, seed=seed + 1)

    # Ensemble of hourly means: per-cell base level plus member/hour noise.
    base = 6.0 + 2.0 * rng.random((n_stations, n_periods))
    means = base[:, :, None, None] + rng.gamma(
        2.0, 0.6, (n_stations, n_periods, n_members, n_hours)
    )
    ens_tmp = EnsemblePanel(means=means, maxima=np.zeros((n_stations, n_periods, n_members)))
    norm = ensemble_normalization(ens_tmp)

    shape_obs, shape_pred = 0.06, 0.03
    obs_margins = StationMargins(
        tag=OBS,
        shape=shape_obs,
        loc=1.5 + 0.4 * rng.random(n_stations),
        scale=0.4 + 0.15 * rng.random(n_stations),
    )
    pred_margins = StationMargins(
        tag=PRED,
        shape=shape_pred,
        loc=1.6 + 0.4 * rng.random(n_stations),
        scale=0.35 + 0.15 * rng.random(n_stations),
    )

    v_obs = np.empty((n_stations, n_periods))
    v_pred = np.empty((n_stations, n_periods))
    for i in range(n_stations):
        po = GevParams(shape_obs, float(obs_margins.loc[i]), float(obs_margins.scale[i]))
        pp = GevParams(shape_pred, float(pred_margins.loc[i]), float(pred_margins.scale[i]))
        v_obs[i] = from_gumbel(fields[:, 0, i], norm.m[i], norm.s[i], po)
        v_pred[i] = from_gumbel(fields[:, 1, i], norm.m[i], norm.s[i], pp)
    v_obs = np.maximum(v_obs, 0.0)
    v_pred = np.maximum(v_pred, 0.0)

    # Member maxima: an underdispersed surrogate ensemble whose member-wise
    # maximum reproduces the forecast value exactly.
    gaps = rng.exponential(0.5, (n_stations, n_periods, n_members))
    gaps[:, :, 0] = 0.0
    maxima = np.maximum(v_pred[:, :, None] - norm.s[:, :, None] * gaps, 0.0)
    ensembles = EnsemblePanel(means=means, maxima=maxima)

    mask = np.zeros((n_stations, n_periods), dtype=bool)
    if missing_frac > 0:
        mask = rng.random((n_stations, n_periods)) < missing_frac

    panel = MaximaPanel(
        station_ids=tuple(f"st{i:03d}" for i in range(n_stations)),
        coords=coords,
        periods=tuple(f"{p + 1}" for p in range(n_periods)),
        blocks=tuple(f"b{(p // block_length) + 1:02d}" for p in range(n_periods)),
        v_obs=v_obs,
        v_pred=ensemble_max_forecast(ensembles),
        mask=mask,
    )
    return SyntheticWorld(
        panel=panel,
        ensembles=ensembles,
        model=model,
        obs_margins=obs_margins,
        pred_margins=pred_margins,
        norm=norm,
        gumbel_fields=fields,
    )


def write_world_csvs(world: SyntheticWorld, directory: Path, seed: int = 99,
                     extra_config: str = "", block_length: int = 30) -> Path:
    """Write the world as the three CLI input files plus a config; returns
    the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    panel, ens = world.panel, world.ensembles

    with open(directory / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "x_km", "y_km", "period", "v_max_obs"])
        for i, sid in enumerate(panel.station_ids):
            for p, period in enumerate(panel.periods):
                val = "" if panel.mask[i, p] else repr(float(panel.v_obs[i, p]))
                w.writerow([sid, repr(float(panel.coords[i, 0])), repr(float(panel.coords[i, 1])),
                            period, val])

    with open(directory / "ensemble_means.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "period", "member", "hour", "v_mean"])
        for i, sid in enumerate(panel.station_ids):
            for p, period in enumerate(panel.periods):
                for j in range(ens.n_members):
                    for h in range(ens.n_hours):
                        w.writerow([sid, period, j + 1, h + 9, repr(float(ens.means[i, p, j, h]))])

    with open(directory / "ensemble_max.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "period", "member", "v_max"])
        for i, sid in enumerate(panel.station_ids):
            for p, period in enumerate(panel.periods):
                for j in range(ens.n_members):
                    w.writerow([sid, period, j + 1, repr(float(ens.maxima[i, p, j]))])

    config = directory / "run.cfg"
    config.write_text(
        "observations = observations.csv\n"
        "ensemble_means = ensemble_means.csv\n"
        "ensemble_max = ensemble_max.csv\n"
        f"seed = {seed}\n"
        "out_dir = out\n"
        f"block_length = {block_length}\n"
        + extra_config
    )
    return config


@pytest.fixture(scope="session")
def small_world() -> SyntheticWorld:
    return make_world(n_stations=10, n_periods=120, seed=404)
