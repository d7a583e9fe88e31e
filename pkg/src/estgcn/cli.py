"""Command-line entry point (``estgcn``).

Exit codes: 0 success, 2 input/config error, 3 numeric error, 4 a run
finished but some windows failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, synthetic_spec, threshold_for, validate
from .conformal import ConformalConfig, ConformalStream
from .data import generate_synthetic_panel, load_panel_csv, write_panel_csv
from .errors import EstgcnError, FitError, InputError, NumericError
from .evt import default_grid, durbin_watson, extract_exceedances, fit_gpd, mean_excess_curve, suggest_mep_threshold
from .geo_graph import AdjacencyConfig, build_adjacency, laplacian_bundle, read_roster_csv, write_roster_csv
from .metrics import dm_test, mase, mcb_test, pinball, rmse, smape, write_csv, write_dm_csv, write_mcb_csv
from .metrics import mae as mae_metric
from .model import forecast, init_model, load_checkpoint, save_checkpoint
from .pipeline import (
    _loss_config,
    _model_config,
    _train_config,
    bundle_digest,
    emit_plot_data,
    fit_window_gpd,
    RunContext,
    run_experiment,
)
from .training import rolling_windows, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

logger = logging.getLogger("estgcn")


def _config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.pollutant is not None:
        cfg["pollutant"] = args.pollutant
    if args.scheme is not None:
        cfg["windows"]["scheme"] = args.scheme
    validate(cfg)
    return cfg


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _panel_and_roster(args, cfg):
    if args.panel:
        if not args.roster:
            raise InputError("--panel needs --roster")
        roster = read_roster_csv(args.roster)
        panel = load_panel_csv(args.panel, roster, cfg["data"]["max_gap"], cfg["data"]["missing_frac"])
        by_id = {s.id: s for s in roster}
        return panel, [by_id[s] for s in panel.station_ids]
    panel, truth = generate_synthetic_panel(synthetic_spec(cfg), seed=int(cfg["seed"]))
    return panel, truth.stations


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, cfg):
    roster = read_roster_csv(args.roster) if args.roster else None
    panel = load_panel_csv(args.input, roster, cfg["data"]["max_gap"], cfg["data"]["missing_frac"])
    out = _out(args)
    write_panel_csv(out / "panel.csv", panel)
    report = {"days": panel.n_days, "stations": panel.station_ids, "dropped": list(panel.dropped)}
    (out / "ingest_report.json").write_text(json.dumps(report, indent=2))
    print(f"{panel.n_days} days x {panel.n_stations} stations; dropped {list(panel.dropped)}")
    return EXIT_OK


def cmd_synth(args, cfg):
    panel, truth = generate_synthetic_panel(synthetic_spec(cfg), seed=int(cfg["seed"]))
    out = _out(args)
    write_panel_csv(out / "panel.csv", panel)
    write_roster_csv(out / "roster.csv", truth.stations)
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2))
    print(f"wrote {panel.n_days} x {panel.n_stations} synthetic panel to {out}")
    return EXIT_OK


def cmd_fit_gpd(args, cfg):
    panel, _ = _panel_and_roster(args, cfg)
    tau = threshold_for(cfg)
    stop = panel.n_days if args.train_days is None else args.train_days
    rows, fits = [], {}
    for sid in panel.station_ids:
        x = panel.column(sid)[:stop]
        exc = extract_exceedances(x, tau)
        row = {"station_id": sid, "threshold": tau, "n_exceed": len(exc), "scale": np.nan, "shape": np.nan,
               "durbin_watson": durbin_watson(exc), "mep_threshold": np.nan}
        try:
            fit = fit_gpd(exc, cfg["evt"]["min_exceedances"])
            fits[sid] = fit.to_dict()
            row.update(scale=fit.scale, shape=fit.shape)
        except FitError as exc_:
            fits[sid] = None
            logger.warning("station %s: %s", sid, exc_)
        try:
            sug = suggest_mep_threshold(mean_excess_curve(x, default_grid(x)))
            if sug.found:
                row["mep_threshold"] = sug.threshold
        except InputError:
            pass
        rows.append(row)
    out = _out(args)
    (out / "gpd_fits.json").write_text(json.dumps(fits, indent=2))
    write_csv(out / "gpd_summary.csv", list(rows[0]) if rows else ["station_id"], rows)
    return EXIT_OK


def cmd_graph(args, cfg):
    roster = read_roster_csv(args.roster) if args.roster else _panel_and_roster(args, cfg)[1]
    g = cfg["graph"]
    graph = build_adjacency(roster, AdjacencyConfig(g["sigma_sq"], g["epsilon"]))
    bundle = laplacian_bundle(graph, fixed_zeta_max=g["fixed_zeta_max"])
    out = _out(args)
    with open(out / "adjacency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id"] + graph.ids)
        for sid, row in zip(graph.ids, graph.adjacency):
            w.writerow([sid] + [repr(float(v)) for v in row])
    doc = {"zeta_max": bundle.zeta_max, "iterations": bundle.iterations, "warnings": list(graph.warnings),
           "normalized_laplacian": bundle.normalized.tolist()}
    (out / "laplacian.json").write_text(json.dumps(doc, indent=2))
    print(f"{graph.n} stations, {int(np.count_nonzero(graph.adjacency) // 2)} edges, zeta_max={bundle.zeta_max:.6g}")
    return EXIT_OK


def cmd_train(args, cfg):
    panel, stations = _panel_and_roster(args, cfg)
    g = cfg["graph"]
    bundle = laplacian_bundle(build_adjacency(stations, AdjacencyConfig(g["sigma_sq"], g["epsilon"])),
                              fixed_zeta_max=g["fixed_zeta_max"])
    tau = threshold_for(cfg)
    ctx = RunContext(cfg, panel, stations, bundle, {s: tau for s in panel.station_ids})
    w = cfg["windows"]
    split = rolling_windows(panel.n_days, w["scheme"], w["anchor"], w["test_days"], w["val_days"])[-1]
    fits, skipped = fit_window_gpd(panel.values, split, ctx)
    model = init_model(_model_config(ctx, split.horizon), bundle, seed=int(cfg["seed"]), station_ids=panel.station_ids)
    loss = _loss_config(ctx, fits, skipped).with_betas(args.beta1, args.beta2)
    res = train(model, panel.values, split, loss, _train_config(ctx, int(cfg["seed"])))
    out = _out(args)
    save_checkpoint(res.model, out / "model.json")
    write_csv(out / "train_log.csv", ["epoch", "train_loss", "val_loss", "wall_ms"], res.log_rows())
    print(f"final train loss {res.train_loss[-1]:.6g}, val loss {res.val_loss[-1]:.6g}")
    return EXIT_OK


def cmd_forecast(args, cfg):
    if not args.checkpoint or not args.panel:
        raise InputError("forecast needs --checkpoint and --panel")
    model = load_checkpoint(args.checkpoint)
    panel = load_panel_csv(args.panel, model.station_ids, cfg["data"]["max_gap"], cfg["data"]["missing_frac"])
    if panel.station_ids != model.station_ids:
        raise InputError(f"panel stations {panel.station_ids} do not match the model's {model.station_ids}")
    fc = forecast(model, panel)
    rows = [{"station_id": sid, "step": h + 1, "forecast": fc[h, i]}
            for i, sid in enumerate(panel.station_ids) for h in range(fc.shape[0])]
    write_csv(_out(args) / "forecast.csv", ["station_id", "step", "forecast"], rows)
    return EXIT_OK


def _read_csv(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise InputError(f"{path} not found") from exc


def _grouped_forecasts(path, column: str):
    """(window_id, station_id) -> (actual, forecast) arrays in step order."""
    groups = defaultdict(list)
    for r in _read_csv(path):
        if column not in r:
            raise InputError(f"{path} has no column {column!r}")
        groups[(r["window_id"], r["station_id"])].append((int(r["step"]), float(r["actual"]), float(r[column]), r["date"]))
    out = {}
    for key, items in groups.items():
        items.sort()
        out[key] = (np.array([i[1] for i in items]), np.array([i[2] for i in items]), items[0][3])
    return out


def cmd_evaluate(args, cfg):
    run = Path(args.run)
    panel = load_panel_csv(run / "panel.csv", max_gap=0, missing_frac=1.0)
    rho = cfg["metrics"]["pinball_rho"]
    try:
        manifest = json.loads((run / "manifest.json").read_text())
        train_ranges = {w["window_id"]: w["train_range"] for w in manifest["windows"]}
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{run} has no readable manifest.json") from exc
    rows = []
    for (wid, sid), (y, f, _) in _grouped_forecasts(run / "forecasts.csv", args.model).items():
        a, b = train_ranges[wid]
        rows.append({"window_id": wid, "station_id": sid, "mae": mae_metric(y, f),
                     "mase": mase(y, f, panel.column(sid)[a:b]), "rmse": rmse(y, f),
                     "smape": smape(y, f), "pinball": pinball(y, f, rho)})
    write_csv(_out(args) / f"metrics_{args.model}.csv",
              ["window_id", "station_id", "mae", "mase", "rmse", "smape", "pinball"], rows)
    return EXIT_OK


def cmd_conformal(args, cfg):
    """Online intervals over a ``station_id,actual,point`` stream file."""
    c = cfg["conformal"]
    ccfg = ConformalConfig(c["rho"], c["window"], "constant")
    streams, rows, hits, total = {}, [], 0, 0
    for r in _read_csv(args.input):
        sid = r["station_id"]
        st = streams.setdefault(sid, ConformalStream(ccfg))
        y, p = float(r["actual"]), float(r["point"])
        if st.scores:
            iv = st.interval(p)
            rows.append({"station_id": sid, "point": p, "lower": iv.lower, "upper": iv.upper,
                         "kappa": iv.kappa, "actual": y, "covered": iv.covers(y)})
            hits += iv.covers(y)
            total += 1
        st.update(y, p)
    write_csv(_out(args) / "stream_intervals.csv",
              ["station_id", "point", "lower", "upper", "kappa", "actual", "covered"], rows)
    if total:
        print(f"empirical coverage {hits / total:.4f} over {total} points")
    return EXIT_OK


def cmd_compare_dm(args, cfg):
    a = _grouped_forecasts(args.forecasts, args.model_a)
    b = _grouped_forecasts(args.forecasts, args.model_b)
    per_station = defaultdict(lambda: ([], [], []))
    for key in sorted(a):
        y, fa, _ = a[key]
        ys, fas, fbs = per_station[key[1]]
        ys.append(y)
        fas.append(fa)
        fbs.append(b[key][1])
    results = [(sid, dm_test(np.concatenate(v[0]), np.concatenate(v[1]), np.concatenate(v[2])))
               for sid, v in per_station.items()]
    write_dm_csv(_out(args) / "dm.csv", results)
    return EXIT_OK


def cmd_compare_mcb(args, cfg):
    """MCB over a long ``window_id,station_id,model,<metric>`` loss table."""
    table = defaultdict(dict)
    models: list[str] = []
    for r in _read_csv(args.losses):
        table[(r["window_id"], r["station_id"])][r["model"]] = float(r[args.metric])
        if r["model"] not in models:
            models.append(r["model"])
    losses = [[row[m] for m in models] for _, row in sorted(table.items())]
    res = mcb_test(np.array(losses), models, cfg["metrics"]["mcb_theta"])
    write_mcb_csv(_out(args) / "mcb.csv", res)
    return EXIT_OK


def cmd_run(args, cfg):
    out = _out(args)
    bundle = run_experiment(cfg, out)
    failed = bundle.failed
    print(f"{len(bundle.windows) - len(failed)}/{len(bundle.windows)} windows ok; digest {bundle_digest(out)}")
    for w in failed:
        print(f"window {w.window_id} failed: {w.error}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_emit_plots(args, cfg):
    paths = emit_plot_data(args.run, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "fit-gpd": cmd_fit_gpd,
    "graph": cmd_graph,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "conformal": cmd_conformal,
    "compare-dm": cmd_compare_dm,
    "compare-mcb": cmd_compare_mcb,
    "run": cmd_run,
    "emit-plots": cmd_emit_plots,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a run manifest")
    common.add_argument("--seed", type=int)
    common.add_argument("--pollutant")
    common.add_argument("--scheme", choices=["short", "medium", "long"])
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="estgcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}

    p["ingest"].add_argument("--input", required=True, help="long-format date,station_id,value CSV")
    p["ingest"].add_argument("--roster")
    for name in ("fit-gpd", "graph", "train"):
        p[name].add_argument("--panel", help="panel CSV (default: synthetic panel from the config)")
        p[name].add_argument("--roster")
    p["fit-gpd"].add_argument("--train-days", type=int)
    p["train"].add_argument("--beta1", type=float, default=1.0)
    p["train"].add_argument("--beta2", type=float, default=0.5)
    p["forecast"].add_argument("--checkpoint")
    p["forecast"].add_argument("--panel")
    p["evaluate"].add_argument("--run", required=True, help="run output directory")
    p["evaluate"].add_argument("--model", default="estgcn", choices=["estgcn", "modified_stgcn", "persistence"])
    p["conformal"].add_argument("--input", required=True, help="CSV with station_id,actual,point rows in time order")
    p["compare-dm"].add_argument("--forecasts", required=True)
    p["compare-dm"].add_argument("--model-a", default="modified_stgcn")
    p["compare-dm"].add_argument("--model-b", default="estgcn")
    p["compare-mcb"].add_argument("--losses", required=True)
    p["compare-mcb"].add_argument("--metric", default="mae")
    p["emit-plots"].add_argument("--run", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EstgcnError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
