import json

import numpy as np
import pytest

from maxpost.cli import ingest, main, parse_config
from maxpost.errors import SchemaError

from conftest import make_world, write_world_csvs

FAST_CONFIG = (
    "model = bivariate\n"
    "n_draws = 6\n"
    "fit_starts = 3\n"
    "fit_maxiter = 2000\n"
    "cv_fit_starts = 1\n"
    "cv_fit_maxiter = 500\n"
    "n_cond_neighbors = 1\n"
    "n_rep = 8\n"
)


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    world = make_world(n_stations=6, n_periods=60, seed=2211, block_length=20)
    directory = tmp_path_factory.mktemp("cli_world")
    config = write_world_csvs(world, directory, seed=31, extra_config=FAST_CONFIG, block_length=20)
    return world, directory, config


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("observations = a.csv\nwhatever = 3\n")
        with pytest.raises(SchemaError, match="unknown key"):
            parse_config(cfg)

    def test_missing_seed_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(
            "observations = a.csv\nensemble_means = b.csv\nensemble_max = c.csv\n"
        )
        with pytest.raises(SchemaError, match="seed"):
            parse_config(cfg)

    def test_duplicate_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(SchemaError, match="duplicate"):
            parse_config(cfg)

    def test_round_trip(self, world_dir):
        _, _, config_path = world_dir
        config = parse_config(config_path)
        assert config.seed == 31
        assert config.pipeline.n_draws == 6


class TestIngest:
    def test_round_trip_matrices(self, world_dir):
        world, _, config_path = world_dir
        config = parse_config(config_path)
        panel, ens = ingest(config)
        assert panel.station_ids == world.panel.station_ids
        assert np.allclose(panel.coords, world.panel.coords)
        # shortest-round-trip float formatting makes re-ingestion exact
        assert np.array_equal(panel.v_obs[~panel.mask], world.panel.v_obs[~world.panel.mask])
        assert np.array_equal(panel.v_pred, world.panel.v_pred)
        assert np.array_equal(ens.means, world.ensembles.means)
        assert np.array_equal(panel.mask, world.panel.mask)

    def test_empty_observations_names_missing_header(self, tmp_path):
        world = make_world(n_stations=4, n_periods=30, seed=1)
        config_path = write_world_csvs(world, tmp_path, seed=1)
        (tmp_path / "observations.csv").write_text("")
        with pytest.raises(SchemaError, match="header"):
            ingest(parse_config(config_path))

    def test_wrong_header_named(self, tmp_path):
        world = make_world(n_stations=4, n_periods=30, seed=2)
        config_path = write_world_csvs(world, tmp_path, seed=1)
        obs = tmp_path / "observations.csv"
        lines = obs.read_text().splitlines()
        lines[0] = "station_id,x_km,y_km,period,wrong_name"
        obs.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match="v_max_obs"):
            ingest(parse_config(config_path))

    def test_duplicate_rows_cite_both_line_numbers(self, tmp_path):
        world = make_world(n_stations=4, n_periods=30, seed=3)
        config_path = write_world_csvs(world, tmp_path, seed=1)
        obs = tmp_path / "observations.csv"
        lines = obs.read_text().splitlines()
        lines.append(lines[1])
        obs.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match=r"lines 2 and 122"):
            ingest(parse_config(config_path))

    def test_missing_values_masked(self, tmp_path, capsys):
        world = make_world(n_stations=4, n_periods=30, seed=4, missing_frac=0.1)
        config_path = write_world_csvs(world, tmp_path, seed=1)
        panel, _ = ingest(parse_config(config_path))
        assert panel.mask.sum() == world.panel.mask.sum()

    def test_all_missing_station_dropped_with_warning(self, tmp_path, capsys):
        world = make_world(n_stations=4, n_periods=30, seed=5)
        mask = world.panel.mask.copy()
        mask[2, :] = True
        from maxpost.postproc import MaximaPanel
        import dataclasses

        panel = MaximaPanel(
            station_ids=world.panel.station_ids,
            coords=world.panel.coords,
            periods=world.panel.periods,
            blocks=world.panel.blocks,
            v_obs=world.panel.v_obs,
            v_pred=world.panel.v_pred,
            mask=mask,
        )
        world = dataclasses.replace(world, panel=panel)
        config_path = write_world_csvs(world, tmp_path, seed=1)
        ingested, _ = ingest(parse_config(config_path))
        captured = capsys.readouterr()
        assert "dropped" in captured.err
        assert len(ingested.station_ids) == 3

    def test_incomplete_ensemble_rejected(self, tmp_path):
        world = make_world(n_stations=4, n_periods=30, seed=6)
        config_path = write_world_csvs(world, tmp_path, seed=1)
        path = tmp_path / "ensemble_max.csv"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(SchemaError, match="missing entry"):
            ingest(parse_config(config_path))


def _run_cli(args):
    return main([str(a) for a in args])


class TestCommands:
    def test_fit_margins_artifacts(self, world_dir, tmp_path):
        _, _, config_path = world_dir
        out = tmp_path / "m"
        rc = _run_cli(["fit-margins", "--config", config_path, "--out", out, "--quiet"])
        assert rc == 0
        obs_rows = (out / "margins_obs.csv").read_text().splitlines()
        assert len(obs_rows) == 1 + 6  # header + stations
        for row in obs_rows[1:]:
            fields = row.split(",")
            assert float(fields[3]) > 0  # fitted scale
        summary = json.loads((out / "margins_summary.json").read_text())
        assert "shape_obs" in summary and "constancy_pvalues" in summary

    def test_fit_dependence_artifacts(self, world_dir, tmp_path):
        _, _, config_path = world_dir
        out = tmp_path / "d"
        rc = _run_cli(["fit-dependence", "--config", config_path, "--out", out, "--quiet"])
        assert rc == 0
        dep = json.loads((out / "dependence.json").read_text())
        assert dep["params"]["kind"] == "bivariate"
        assert dep["objective"] >= 0
        table = (out / "theta_table.csv").read_text().splitlines()
        n = 6
        assert len(table) == 1 + 2 * n * (n - 1) + 2 * n * n

    def test_simulate_artifacts(self, world_dir, tmp_path):
        _, _, config_path = world_dir
        out = tmp_path / "s"
        rc = _run_cli(["simulate", "--config", config_path, "--out", out, "--quiet"])
        assert rc == 0
        rows = (out / "simulations.csv").read_text().splitlines()
        assert len(rows) == 1 + 8 * 2 * 6  # n_rep x components x stations

    def test_plot_data_artifacts(self, world_dir, tmp_path):
        _, _, config_path = world_dir
        out = tmp_path / "p"
        rc = _run_cli(["plot-data", "--config", config_path, "--out", out, "--quiet"])
        assert rc == 0
        rows = (out / "plotdata.csv").read_text().splitlines()
        header = rows[0].split(",")
        assert header == [
            "comp_i", "comp_j", "station_i", "station_j", "distance_km",
            "theta_hat", "theta_fitted", "weight",
        ]
        values = rows[1].split(",")
        assert 1.0 <= float(values[5]) <= 2.0
        assert 1.0 <= float(values[6]) <= 2.0

    def test_verify_deterministic_artifacts(self, world_dir, tmp_path):
        _, _, config_path = world_dir
        out1, out2 = tmp_path / "v1", tmp_path / "v2"
        assert _run_cli(["verify", "--config", config_path, "--out", out1, "--quiet"]) == 0
        assert _run_cli(["verify", "--config", config_path, "--out", out2, "--quiet"]) == 0
        for name in ("scores.csv", "report.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        report = json.loads((out1 / "report.json").read_text())
        assert report["skill_pp_vs_ensemble"] is not None

    def test_seed_override_changes_artifacts(self, world_dir, tmp_path):
        _, _, config_path = world_dir
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        _run_cli(["postprocess", "--config", config_path, "--out", out1, "--quiet"])
        _run_cli(["postprocess", "--config", config_path, "--out", out2, "--quiet",
                  "--seed", "777"])
        a = (out1 / "postprocessed.csv").read_bytes()
        b = (out2 / "postprocessed.csv").read_bytes()
        assert a != b

    def test_schema_error_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nонsense\n")
        rc = _run_cli(["fit-margins", "--config", cfg])
        assert rc == 2
        err = capsys.readouterr().err.strip().splitlines()[-1]
        payload = json.loads(err)
        assert payload["error"] == "schema"
