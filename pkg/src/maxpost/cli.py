"""Command-line driver: data ingestion, configuration, command orchestration
and artifact emission.

Input files are comma-separated text with headers:

    observations:   station_id, x_km, y_km, period, v_max_obs
    ensemble_means: station_id, period, member, hour, v_mean
    ensemble_max:   station_id, period, member, v_max

Missing observations are empty fields; the ensemble files must be dense.
The configuration is line-based ``key = value`` text; unknown keys are
rejected and a seed is required (no wall-clock entropy anywhere).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .depfit import BIVARIATE, UNIVARIATE
from .errors import FitError, SamplerError, SchemaError
from .maxstable import simulate_brown_resnick_panel
from .pipeline import (
    MarginsBundle,
    PipelineConfig,
    fit_dependence_pipeline,
    fit_margins_pipeline,
    postprocess_panel,
)
from .postproc import (
    EnsemblePanel,
    MaximaPanel,
    ensemble_max_forecast,
    ensemble_normalization,
)
from .variogram import OBS, PRED, PowerVariogram
from .verify import combine_reports, cross_validate, score_models

COMMANDS = (
    "fit-margins",
    "fit-dependence",
    "simulate",
    "postprocess",
    "verify",
    "cross-validate",
    "plot-data",
)

_OBS_HEADER = ["station_id", "x_km", "y_km", "period", "v_max_obs"]
_MEANS_HEADER = ["station_id", "period", "member", "hour", "v_mean"]
_MAX_HEADER = ["station_id", "period", "member", "v_max"]


@dataclass(frozen=True)
class RunConfig:
    """Parsed run configuration; every field maps to one config-file key."""

    observations: Path
    ensemble_means: Path
    ensemble_max: Path
    seed: int
    out_dir: Path = Path("out")
    block_length: int = 30
    blocks_file: Optional[Path] = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    quiet: bool = False


_INT_KEYS = {
    "seed",
    "block_length",
    "n_draws",
    "fit_starts",
    "fit_maxiter",
    "cv_fit_starts",
    "cv_fit_maxiter",
    "n_cond_neighbors",
    "es_pairs",
    "es_br_samples",
    "es_ind_samples",
    "exact_partition_limit",
    "gibbs_sweeps",
    "rejection_budget",
    "n_rep",
}
_FLOAT_KEYS = {"chi", "s_floor"}
_PATH_KEYS = {"observations", "ensemble_means", "ensemble_max", "blocks_file", "out_dir"}
_STR_KEYS = {"model"}


def parse_config(path: Path) -> RunConfig:
    """Parse a ``key = value`` configuration file."""
    raw: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SchemaError(f"config line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        known = _INT_KEYS | _FLOAT_KEYS | _PATH_KEYS | _STR_KEYS
        if key not in known:
            raise SchemaError(f"config line {lineno}: unknown key {key!r}")
        if key in raw:
            raise SchemaError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = value

    for req in ("observations", "ensemble_means", "ensemble_max", "seed"):
        if req not in raw:
            raise SchemaError(f"config is missing required key {req!r}")

    def geti(key, default):
        if key not in raw:
            return default
        try:
            return int(raw[key])
        except ValueError as exc:
            raise SchemaError(f"config key {key!r} must be an integer") from exc

    def getf(key, default):
        if key not in raw:
            return default
        try:
            return float(raw[key])
        except ValueError as exc:
            raise SchemaError(f"config key {key!r} must be a number") from exc

    base = Path(path).parent
    defaults = PipelineConfig()
    model_kind = raw.get("model", defaults.model_kind)
    if model_kind not in (UNIVARIATE, BIVARIATE):
        raise SchemaError(f"config key 'model' must be univariate or bivariate")
    chi = getf("chi", defaults.chi)
    s_floor = getf("s_floor", defaults.s_floor)
    if not (0 < chi < 2):
        raise SchemaError("config key 'chi' must lie in (0, 2)")
    if s_floor <= 0:
        raise SchemaError("config key 's_floor' must be positive")
    pipeline = PipelineConfig(
        model_kind=model_kind,
        n_draws=geti("n_draws", defaults.n_draws),
        chi=chi,
        s_floor=s_floor,
        fit_starts=geti("fit_starts", defaults.fit_starts),
        fit_maxiter=geti("fit_maxiter", defaults.fit_maxiter),
        cv_fit_starts=geti("cv_fit_starts", defaults.cv_fit_starts),
        cv_fit_maxiter=geti("cv_fit_maxiter", defaults.cv_fit_maxiter),
        n_cond_neighbors=geti("n_cond_neighbors", defaults.n_cond_neighbors),
        es_pairs=geti("es_pairs", defaults.es_pairs),
        es_br_samples=geti("es_br_samples", defaults.es_br_samples),
        es_ind_samples=geti("es_ind_samples", defaults.es_ind_samples),
        exact_partition_limit=geti("exact_partition_limit", defaults.exact_partition_limit),
        gibbs_sweeps=geti("gibbs_sweeps", defaults.gibbs_sweeps),
        rejection_budget=geti("rejection_budget", defaults.rejection_budget),
        n_rep=geti("n_rep", defaults.n_rep),
    )
    block_length = geti("block_length", 30)
    if block_length < 1:
        raise SchemaError("config key 'block_length' must be >= 1")
    return RunConfig(
        observations=base / raw["observations"],
        ensemble_means=base / raw["ensemble_means"],
        ensemble_max=base / raw["ensemble_max"],
        seed=geti("seed", None),
        out_dir=base / raw.get("out_dir", "out"),
        block_length=block_length,
        blocks_file=(base / raw["blocks_file"]) if "blocks_file" in raw else None,
        pipeline=pipeline,
    )


def _read_csv(path: Path, header: list[str]):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise SchemaError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, missing header {header}")
        got = [c.strip() for c in got]
        missing = [c for c in header if c not in got]
        if missing:
            raise SchemaError(f"{path}: missing header column {missing[0]!r}")
        extra = [c for c in got if c not in header]
        if extra:
            raise SchemaError(f"{path}: unexpected column {extra[0]!r}")
        pos = [got.index(c) for c in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(got):
                raise SchemaError(f"{path}:{lineno}: expected {len(got)} fields, got {len(row)}")
            rows.append((lineno, [row[p].strip() for p in pos]))
    return rows


def _parse_float(path, lineno, col, text, allow_empty=False):
    if text == "":
        if allow_empty:
            return None
        raise SchemaError(f"{path}:{lineno}: column {col!r} must not be empty")
    try:
        return float(text)
    except ValueError as exc:
        raise SchemaError(f"{path}:{lineno}: column {col!r}: not a number: {text!r}") from exc


def _sort_key(label: str):
    return (0, int(label), "") if label.isdigit() else (1, 0, label)


def ingest(config: RunConfig) -> tuple[MaximaPanel, EnsemblePanel]:
    """Read and validate the three input files into panels.

    The forecast maxima of the panel are the member-wise ensemble maxima.
    Stations whose observation series is entirely missing are dropped with
    a warning line.
    """
    obs_rows = _read_csv(config.observations, _OBS_HEADER)
    seen: dict[tuple[str, str], int] = {}
    coords: dict[str, tuple[float, float]] = {}
    values: dict[tuple[str, str], Optional[float]] = {}
    periods_set = {}
    for lineno, (sid, x, y, period, v) in obs_rows:
        key = (sid, period)
        if key in seen:
            raise SchemaError(
                f"{config.observations}: duplicate (station, period) ({sid!r}, {period!r}) "
                f"at lines {seen[key]} and {lineno}"
            )
        seen[key] = lineno
        xv = _parse_float(config.observations, lineno, "x_km", x)
        yv = _parse_float(config.observations, lineno, "y_km", y)
        if sid in coords and coords[sid] != (xv, yv):
            raise SchemaError(
                f"{config.observations}:{lineno}: station {sid!r} coordinates changed"
            )
        coords[sid] = (xv, yv)
        vv = _parse_float(config.observations, lineno, "v_max_obs", v, allow_empty=True)
        if vv is not None and vv < 0:
            raise SchemaError(f"{config.observations}:{lineno}: negative wind maximum")
        values[key] = vv
        periods_set[period] = True

    stations = sorted(coords, key=_sort_key)
    periods = sorted(periods_set, key=_sort_key)
    keep = []
    for sid in stations:
        if any(values.get((sid, p)) is not None for p in periods):
            keep.append(sid)
        elif not config.quiet:
            print(f"warning: station {sid!r} has no observations; dropped", file=sys.stderr)
    stations = keep
    if not stations:
        raise SchemaError(f"{config.observations}: no station has any observation")
    n_l, n_p = len(stations), len(periods)
    sidx = {s: i for i, s in enumerate(stations)}
    pidx = {p: i for i, p in enumerate(periods)}

    v_obs = np.zeros((n_l, n_p))
    mask = np.ones((n_l, n_p), dtype=bool)
    for (sid, period), v in values.items():
        if sid in sidx and v is not None:
            v_obs[sidx[sid], pidx[period]] = v
            mask[sidx[sid], pidx[period]] = False

    # Ensemble means: dense (station, period, member, hour) grid required.
    mean_rows = _read_csv(config.ensemble_means, _MEANS_HEADER)
    members = sorted({r[1][2] for r in mean_rows}, key=_sort_key)
    hours = sorted({r[1][3] for r in mean_rows}, key=_sort_key)
    midx = {m: i for i, m in enumerate(members)}
    hidx = {h: i for i, h in enumerate(hours)}
    means = np.full((n_l, n_p, len(members), len(hours)), np.nan)
    for lineno, (sid, period, member, hour, v) in mean_rows:
        if sid not in sidx:
            continue
        if period not in pidx:
            raise SchemaError(
                f"{config.ensemble_means}:{lineno}: unknown period {period!r}"
            )
        vv = _parse_float(config.ensemble_means, lineno, "v_mean", v)
        if vv < 0:
            raise SchemaError(f"{config.ensemble_means}:{lineno}: negative wind mean")
        means[sidx[sid], pidx[period], midx[member], hidx[hour]] = vv
    if np.any(np.isnan(means)):
        i = np.argwhere(np.isnan(means))[0]
        raise SchemaError(
            f"{config.ensemble_means}: missing entry for station {stations[i[0]]!r}, "
            f"period {periods[i[1]]!r}, member {members[i[2]]!r}, hour {hours[i[3]]!r}"
        )

    max_rows = _read_csv(config.ensemble_max, _MAX_HEADER)
    members_max = sorted({r[1][2] for r in max_rows}, key=_sort_key)
    mmidx = {m: i for i, m in enumerate(members_max)}
    maxima = np.full((n_l, n_p, len(members_max)), np.nan)
    for lineno, (sid, period, member, v) in max_rows:
        if sid not in sidx:
            continue
        if period not in pidx:
            raise SchemaError(f"{config.ensemble_max}:{lineno}: unknown period {period!r}")
        vv = _parse_float(config.ensemble_max, lineno, "v_max", v)
        if vv < 0:
            raise SchemaError(f"{config.ensemble_max}:{lineno}: negative wind maximum")
        maxima[sidx[sid], pidx[period], mmidx[member]] = vv
    if np.any(np.isnan(maxima)):
        i = np.argwhere(np.isnan(maxima))[0]
        raise SchemaError(
            f"{config.ensemble_max}: missing entry for station {stations[i[0]]!r}, "
            f"period {periods[i[1]]!r}, member {members_max[i[2]]!r}"
        )

    ensembles = EnsemblePanel(means=means, maxima=maxima)
    blocks = _period_blocks(config, periods)
    panel = MaximaPanel(
        station_ids=tuple(stations),
        coords=np.array([coords[s] for s in stations]),
        periods=tuple(periods),
        blocks=blocks,
        v_obs=v_obs,
        v_pred=ensemble_max_forecast(ensembles),
        mask=mask,
    )
    return panel, ensembles


def _period_blocks(config: RunConfig, periods: Sequence[str]) -> tuple:
    """Month-like block label per period, from a mapping file or by length."""
    if config.blocks_file is not None:
        rows = _read_csv(config.blocks_file, ["period", "block"])
        mapping = {}
        for lineno, (period, block) in rows:
            if period in mapping:
                raise SchemaError(f"{config.blocks_file}:{lineno}: duplicate period {period!r}")
            mapping[period] = block
        missing = [p for p in periods if p not in mapping]
        if missing:
            raise SchemaError(f"{config.blocks_file}: no block for period {missing[0]!r}")
        return tuple(mapping[p] for p in periods)
    return tuple(f"b{(i // config.block_length) + 1:02d}" for i in range(len(periods)))


# ---------------------------------------------------------------------------
# artifact helpers

def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return format(x, ".12g")
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(c) for c in row])


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _params_dict(params) -> dict:
    if isinstance(params, PowerVariogram):
        return {
            "kind": UNIVARIATE,
            "scale": params.scale,
            "aniso_ratio": params.aniso.ratio,
            "aniso_angle": params.aniso.angle,
            "exponent": params.exponent,
        }
    return {
        "kind": BIVARIATE,
        "sigma": params.sigma,
        "kappa": params.kappa,
        "aniso_ratio": params.aniso.ratio,
        "aniso_angle": params.aniso.angle,
        "beta": params.beta,
        "c": params.c,
        "sigma1": params.sigma1,
        "nu1": params.nu1,
        "sigma2": params.sigma2,
        "nu2": params.nu2,
        "a": params.a,
        "rho": params.rho,
    }


def _margins_rows(bundle: MarginsBundle, tag: str, panel: MaximaPanel):
    free = bundle.free_fits_obs if tag == OBS else bundle.free_fits_pred
    margins = bundle.obs_margins if tag == OBS else bundle.pred_margins
    ks = bundle.ks_pvalues[tag]
    for i, sid in enumerate(panel.station_ids):
        yield (
            sid,
            margins.shape,
            margins.loc[i],
            margins.scale[i],
            free[i].params.shape,
            free[i].se_shape,
            free[i].se_loc,
            free[i].se_scale,
            free[i].loglik,
            free[i].n_samples,
            ks[i],
        )


_MARGINS_HEADER = [
    "station_id",
    "shape",
    "loc",
    "scale",
    "shape_free",
    "se_shape_free",
    "se_loc_free",
    "se_scale_free",
    "loglik_free",
    "n_samples",
    "ks_p_gumbel",
]


def run(command: str, config: RunConfig) -> int:
    """Execute one CLI command; writes artifacts under the output directory."""
    if command not in COMMANDS:
        raise SchemaError(f"unknown command {command!r}")
    panel, ensembles = ingest(config)
    out = config.out_dir
    pcfg = config.pipeline
    seed = config.seed

    def log(msg):
        if not config.quiet:
            print(msg, file=sys.stderr)

    bundle = fit_margins_pipeline(panel, ensembles, pcfg)
    log(f"fitted margins for {panel.n_stations} stations, {panel.n_periods} periods")

    if command == "fit-margins":
        _write_csv(out / "margins_obs.csv", _MARGINS_HEADER, _margins_rows(bundle, OBS, panel))
        _write_csv(out / "margins_pred.csv", _MARGINS_HEADER, _margins_rows(bundle, PRED, panel))
        _write_json(
            out / "margins_summary.json",
            {
                "shape_obs": bundle.obs_margins.shape,
                "shape_pred": bundle.pred_margins.shape,
                "constancy_pvalues": {
                    f"{tag}_{which}": bundle.constancy[(tag, which)]
                    for tag, which in bundle.constancy
                },
                "ks_min_obs": float(np.min(bundle.ks_pvalues[OBS])),
                "ks_mean_obs": float(np.mean(bundle.ks_pvalues[OBS])),
                "ks_min_pred": float(np.min(bundle.ks_pvalues[PRED])),
                "ks_mean_pred": float(np.mean(bundle.ks_pvalues[PRED])),
                "seed": seed,
            },
        )
        return 0

    fit, estimates = fit_dependence_pipeline(panel, bundle, pcfg, seed=seed)
    if not fit.converged:
        raise FitError("dependence fit did not converge")
    log(f"dependence fit: objective {fit.objective:.6g} after {fit.iterations} iterations")

    theta_rows = [
        (
            e.i,
            e.j,
            panel.station_ids[e.i],
            panel.station_ids[e.j],
            e.components[0],
            e.components[1],
            math.hypot(*e.lag),
            e.theta,
            e.variance,
        )
        for e in estimates
    ]
    theta_header = [
        "i",
        "j",
        "station_i",
        "station_j",
        "comp_i",
        "comp_j",
        "distance_km",
        "theta",
        "variance",
    ]

    if command == "fit-dependence":
        _write_csv(out / "theta_table.csv", theta_header, theta_rows)
        _write_json(
            out / "dependence.json",
            {
                "params": _params_dict(fit.params),
                "objective": fit.objective,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "n_excluded": fit.n_excluded,
                "seed": seed,
            },
        )
        return 0

    if command == "plot-data":
        from .maxstable import extremal_coefficient

        rows = []
        for e in estimates:
            fitted = extremal_coefficient(
                fit.params,
                np.array(e.lag),
                np.zeros(2),
                components=e.components,
            )
            weight = 0.0 if e.variance <= 0 else 1.0 / e.variance
            rows.append(
                (
                    e.components[0],
                    e.components[1],
                    panel.station_ids[e.i],
                    panel.station_ids[e.j],
                    math.hypot(*e.lag),
                    e.theta,
                    fitted,
                    weight,
                )
            )
        _write_csv(
            out / "plotdata.csv",
            ["comp_i", "comp_j", "station_i", "station_j", "distance_km", "theta_hat",
             "theta_fitted", "weight"],
            rows,
        )
        return 0

    if command == "simulate":
        values = simulate_brown_resnick_panel(panel.coords, fit.params, pcfg.n_rep, seed)
        comps = (OBS,) if values.shape[1] == 1 else (OBS, PRED)
        rows = (
            (rep, comps[c], panel.station_ids[i], values[rep, c, i])
            for rep in range(values.shape[0])
            for c in range(values.shape[1])
            for i in range(panel.n_stations)
        )
        _write_csv(out / "simulations.csv", ["replicate", "component", "station_id", "value"], rows)
        return 0

    if command in ("postprocess", "verify"):
        if pcfg.model_kind != BIVARIATE:
            raise SchemaError(f"{command} requires model = bivariate")
        norm = ensemble_normalization(ensembles, pcfg.s_floor)
        fields, n_clamped = postprocess_panel(
            panel, ensembles, norm, bundle.obs_margins, bundle.pred_margins,
            fit.params, pcfg, seed,
        )
        log(f"post-processed {panel.n_stations * panel.n_periods} cells "
            f"({n_clamped} support clamps)")
        if command == "postprocess":
            rows = (
                (panel.periods[p], panel.station_ids[i], k, fields[k, i, p])
                for p in range(panel.n_periods)
                for i in range(panel.n_stations)
                for k in range(pcfg.n_draws)
            )
            _write_csv(
                out / "postprocessed.csv",
                ["period", "station_id", "draw", "v_max_mps"],
                rows,
            )
            _write_json(
                out / "postprocess.json",
                {"n_clamped": n_clamped, "n_draws": pcfg.n_draws, "seed": seed},
            )
            return 0

        report = score_models(
            panel, ensembles, bundle.obs_margins, bundle.pred_margins,
            fit.params, pcfg, seed, pp_fields=fields,
        )
        rows = []
        for i, sid in enumerate(panel.station_ids):
            rows.append(
                (
                    sid,
                    int(report.n_periods_scored[i]),
                    report.crps_obs[i],
                    report.crps_pred[i],
                    report.crps_orig[i],
                    report.crps_biv[i] if report.crps_biv is not None else float("nan"),
                )
            )
        _write_csv(
            out / "scores.csv",
            ["station_id", "n_periods", "crps_obs", "crps_pred", "crps_orig", "crps_biv"],
            rows,
        )
        _write_json(
            out / "report.json",
            {
                "skill_gev_vs_pred": report.skill_gev_vs_pred,
                "skill_gev_vs_ensemble": report.skill_gev_vs_ensemble,
                "skill_pp_vs_ensemble": report.skill_pp_vs_ensemble,
                "n_clamped": n_clamped,
                "n_draws": pcfg.n_draws,
                "seed": seed,
            },
        )
        return 0

    if command == "cross-validate":
        reports = cross_validate(panel, ensembles, pcfg, seed)
        rows = []
        for rep in reports:
            for i, sid in enumerate(rep.station_ids):
                rows.append(
                    (
                        rep.block,
                        sid,
                        int(rep.n_periods_scored[i]),
                        rep.crps_obs[i],
                        rep.crps_pred[i],
                        rep.crps_orig[i],
                        rep.crps_biv[i] if rep.crps_biv is not None else float("nan"),
                    )
                )
        _write_csv(
            out / "cv_scores.csv",
            ["block", "station_id", "n_periods", "crps_obs", "crps_pred", "crps_orig",
             "crps_biv"],
            rows,
        )
        pooled = combine_reports(reports)
        _write_json(
            out / "cv_report.json",
            {
                "pooled": pooled,
                "blocks": {
                    rep.block: {
                        "skill_gev_vs_pred": rep.skill_gev_vs_pred,
                        "skill_gev_vs_ensemble": rep.skill_gev_vs_ensemble,
                        "skill_pp_vs_ensemble": rep.skill_pp_vs_ensemble,
                    }
                    for rep in reports
                },
                "seed": seed,
            },
        )
        return 0

    raise SchemaError(f"unknown command {command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="maxpost",
        description="Spatial post-processing of forecast maxima.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=Path, default=None, help="override the output directory")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        config = parse_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.out is not None:
            config = dataclasses.replace(config, out_dir=args.out)
        if args.quiet:
            config = dataclasses.replace(config, quiet=True)
        return run(args.command, config)
    except SchemaError as exc:
        print(json.dumps({"error": "schema", "message": str(exc)}), file=sys.stderr)
        return 2
    except FitError as exc:
        print(json.dumps({"error": "fit", "message": str(exc)}), file=sys.stderr)
        return 3
    except SamplerError as exc:
        print(json.dumps({"error": "sampler", "message": str(exc)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
