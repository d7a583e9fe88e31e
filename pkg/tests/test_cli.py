import csv
import json

import numpy as np
import pytest

from estgcn.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_PARTIAL, main
from estgcn.config import DEFAULTS, NAAQS_THRESHOLDS, load_config, resolve, threshold_for
from estgcn.errors import ConfigError, NumericError

SMALL = {
    "seed": 2,
    "data": {"synthetic": {"n_stations": 3, "n_days": 200}},
    "evt": {"min_exceedances": 5},
    "model": {"k_layers": 1, "spatial_hidden": 2, "lag": 3, "hidden": 3, "seq_len": 1},
    "training": {"epochs": 1},
    "betas": {"grid": [[1.0, 0.0], [1.0, 0.5]]},
    "windows": {"scheme": "long", "test_days": 40},
    "conformal": {"window": 20},
    "metrics": {"crps_samples": 10},
}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


# --- config -------------------------------------------------------------------------


def test_defaults_resolve_and_thresholds():
    cfg = resolve()
    assert cfg == resolve({})
    assert threshold_for(cfg) == 60.0
    assert {p: threshold_for(resolve({"pollutant": p})) for p in NAAQS_THRESHOLDS} == NAAQS_THRESHOLDS
    assert threshold_for(resolve({"pollutant": "SO2", "threshold": 40})) == 40.0


@pytest.mark.parametrize(
    "override",
    [
        {"trainig": {}},
        {"model": {"hiden": 3}},
        {"model": 3},
        {"pollutant": "SO2"},
        {"betas": {"selection": "global"}},
        {"betas": {"grid": []}},
        {"windows": {"scheme": "daily"}},
        {"workers": 0},
    ],
)
def test_bad_config_rejected(override):
    with pytest.raises(ConfigError):
        resolve(override)


def test_deep_merge_keeps_siblings():
    cfg = resolve({"model": {"hidden": 5}})
    assert cfg["model"]["hidden"] == 5
    assert cfg["model"]["lag"] == DEFAULTS["model"]["lag"]


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# --- commands -----------------------------------------------------------------------


def test_synth_fit_graph_train_forecast(tmp_path, cfg_path):
    out = tmp_path / "s"
    assert main(["synth", "--config", cfg_path, "--out", str(out)]) == EXIT_OK
    panel, roster = str(out / "panel.csv"), str(out / "roster.csv")
    assert len(rows(panel)) == 600

    assert main(["fit-gpd", "--config", cfg_path, "--panel", panel, "--roster", roster, "--train-days", "150",
                 "--out", str(tmp_path / "g")]) == EXIT_OK
    fits = json.loads((tmp_path / "g" / "gpd_fits.json").read_text())
    assert set(fits) == {"S01", "S02", "S03"}

    assert main(["graph", "--config", cfg_path, "--roster", roster, "--out", str(tmp_path / "gr")]) == EXIT_OK
    adj = rows(tmp_path / "gr" / "adjacency.csv")
    assert len(adj) == 3 and all(r[r["station_id"]] == "0.0" for r in adj)

    assert main(["train", "--config", cfg_path, "--panel", panel, "--roster", roster,
                 "--out", str(tmp_path / "t")]) == EXIT_OK
    assert len(rows(tmp_path / "t" / "train_log.csv")) == 1

    assert main(["forecast", "--checkpoint", str(tmp_path / "t" / "model.json"), "--panel", panel,
                 "--out", str(tmp_path / "f")]) == EXIT_OK
    fc = rows(tmp_path / "f" / "forecast.csv")
    assert len(fc) == 3 * 10 and all(np.isfinite(float(r["forecast"])) for r in fc)


def test_ingest_reports_dropped(tmp_path, capsys):
    src = tmp_path / "raw.csv"
    lines = ["date,station_id,value"] + [f"2021-02-{d:02d},a,{d}" for d in range(1, 11)]
    lines += [f"2021-02-{d:02d},b,{d}" for d in range(1, 4)]
    src.write_text("\n".join(lines) + "\n")
    assert main(["ingest", "--input", str(src), "--out", str(tmp_path / "i")]) == EXIT_OK
    rep = json.loads((tmp_path / "i" / "ingest_report.json").read_text())
    assert rep["dropped"] == ["b"] and rep["days"] == 10


def test_run_then_comparisons_and_plots(tmp_path, cfg_path):
    run = tmp_path / "run"
    assert main(["run", "--config", cfg_path, "--out", str(run)]) == EXIT_OK
    assert main(["evaluate", "--run", str(run), "--out", str(tmp_path / "e")]) == EXIT_OK
    ev = rows(tmp_path / "e" / "metrics_estgcn.csv")
    ref = rows(run / "metrics.csv")
    assert [float(r["mae"]) for r in ev] == pytest.approx([float(r["mae"]) for r in ref], rel=1e-12)
    assert [float(r["mase"]) for r in ev] == pytest.approx([float(r["mase"]) for r in ref], rel=1e-12)

    assert main(["compare-dm", "--forecasts", str(run / "forecasts.csv"), "--out", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "dm.csv").read_bytes() == (run / "dm.csv").read_bytes()

    losses = tmp_path / "losses.csv"
    mm = rows(run / "model_metrics.csv")
    with open(losses, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["window_id", "station_id", "model", "mae", "rmse"])
        w.writeheader()
        w.writerows(mm)
    assert main(["compare-mcb", "--losses", str(losses), "--out", str(tmp_path / "m")]) == EXIT_OK
    assert (tmp_path / "m" / "mcb.csv").read_bytes() == (run / "mcb.csv").read_bytes()

    assert main(["emit-plots", "--run", str(run), "--out", str(tmp_path / "p")]) == EXIT_OK
    assert (tmp_path / "p" / "forecast_vs_actual.csv").exists()


def test_conformal_stream_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    src = tmp_path / "stream.csv"
    with open(src, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "actual", "point"])
        for _ in range(300):
            w.writerow(["a", repr(float(rng.normal())), "0.0"])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"conformal": {"window": 100}}))
    assert main(["conformal", "--config", str(cfg), "--input", str(src), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = rows(tmp_path / "o" / "stream_intervals.csv")
    assert len(out) == 299
    assert "empirical coverage" in capsys.readouterr().out


def test_exit_codes(tmp_path, cfg_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert main(["ingest", "--input", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert main(["forecast", "--out", str(tmp_path / "x")]) == EXIT_INPUT

    import estgcn.cli as cli

    def explode(cfg, out):
        raise NumericError("diverged")

    monkeypatch.setattr(cli, "run_experiment", explode)
    assert main(["run", "--config", cfg_path, "--out", str(tmp_path / "x")]) == EXIT_NUMERIC


def test_partial_failure_exit_code(tmp_path, cfg_path, monkeypatch):
    import estgcn.pipeline as pl

    real = pl._run_window

    def flaky(ctx, index, split, pair, abl, out):
        if index == 1:
            raise ValueError("bad window")
        real(ctx, index, split, pair, abl, out)

    monkeypatch.setattr(pl, "_run_window", flaky)
    assert main(["run", "--config", cfg_path, "--out", str(tmp_path / "r")]) == EXIT_PARTIAL


def test_flag_overrides_reach_the_manifest(tmp_path, cfg_path):
    assert main(["run", "--config", cfg_path, "--seed", "9", "--pollutant", "NO2", "--scheme", "long",
                 "--out", str(tmp_path / "r")]) == EXIT_OK
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["seed"] == 9 and man["pollutant"] == "NO2"
    assert set(man["thresholds"].values()) == {80.0}
