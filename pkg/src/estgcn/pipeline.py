"""End-to-end rolling-window experiment: GP fits, beta selection, training,
forecasting, conformal intervals, metrics and model comparisons.

Everything written under the output directory except ``logs/`` is a pure
function of the configuration (including its seed), so two runs of the same
manifest produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import synthetic_spec, threshold_for
from .conformal import ConformalConfig, conformal_interval, conformal_quantile, conformal_score, uncertainty_scale
from .data import SeriesPanel, generate_synthetic_panel, load_panel_csv, write_panel_csv
from .errors import ConfigError, EstgcnError, FitError, InputError, NumericError
from .evt import GpdFit, default_grid, extract_exceedances, fit_gpd, mean_excess_curve
from .geo_graph import (
    AdjacencyConfig,
    LaplacianBundle,
    StationMeta,
    build_adjacency,
    laplacian_bundle,
    read_roster_csv,
    write_roster_csv,
)
from .metrics import dm_test, mae, mcb_test, metric_report, write_csv, write_dm_csv, write_mcb_csv, write_metrics_csv
from .model import EstgcnModel, ModelConfig, forecast, init_model, predict_windows, save_checkpoint
from .training import LossConfig, TrainConfig, TrainResult, WindowSplit, rolling_windows, select_betas, train

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "estgcn-manifest"
MODELS = ("E-STGCN", "modified-STGCN", "persistence")
FORECAST_COLUMNS = ["window_id", "station_id", "step", "date", "actual", "estgcn", "modified_stgcn", "persistence"]
INTERVAL_COLUMNS = ["window_id", "station_id", "step", "point", "lower", "upper", "kappa"]
BETA_COLUMNS = ["window_id", "beta1", "beta2", "val_rmse", "status"]
LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "wall_ms"]


@dataclass
class RunContext:
    """Everything a window needs; picklable so windows can run in worker processes."""

    cfg: dict
    panel: SeriesPanel
    stations: list[StationMeta]
    bundle: LaplacianBundle
    thresholds: dict[str, float]


@dataclass
class WindowResult:
    window_id: str
    split: WindowSplit
    status: str = "ok"
    error: str | None = None
    pair: tuple[float, float] | None = None
    ablation_pair: tuple[float, float] | None = None
    fits: dict = field(default_factory=dict)
    no_potl: list[str] = field(default_factory=list)
    beta_table: list[dict] = field(default_factory=list)
    forecast_rows: list[dict] = field(default_factory=list)
    interval_rows: list[dict] = field(default_factory=list)
    metric_rows: list[dict] = field(default_factory=list)
    model_metric_rows: list[dict] = field(default_factory=list)
    logs: dict[str, list[dict]] = field(default_factory=dict)
    checkpoint: str | None = None
    model: EstgcnModel | None = None
    # per model: (N, q) arrays of actual and forecasts for DM / MCB
    actual: np.ndarray | None = None
    forecasts: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ResultBundle:
    manifest: dict
    windows: list[WindowResult]
    beta_rows: list[dict] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def failed(self) -> list[WindowResult]:
        return [w for w in self.windows if w.status != "ok"]


# ---------------------------------------------------------------------------
# setup


def load_inputs(cfg: dict) -> tuple[SeriesPanel, list[StationMeta], dict | None]:
    data = cfg["data"]
    if data["panel_csv"]:
        if not data["roster_csv"]:
            raise ConfigError("data.panel_csv needs data.roster_csv for station coordinates")
        roster = read_roster_csv(data["roster_csv"])
        panel = load_panel_csv(data["panel_csv"], roster, data["max_gap"], data["missing_frac"])
        by_id = {s.id: s for s in roster}
        return panel, [by_id[s] for s in panel.station_ids], None
    panel, truth = generate_synthetic_panel(synthetic_spec(cfg), seed=int(cfg["seed"]))
    return panel, truth.stations, truth.to_dict()


def build_context(cfg: dict) -> tuple[RunContext, dict | None]:
    panel, stations, truth = load_inputs(cfg)
    if panel.n_stations < 2:
        raise InputError(f"only {panel.n_stations} stations left after cleaning")
    g = cfg["graph"]
    graph = build_adjacency(stations, AdjacencyConfig(g["sigma_sq"], g["epsilon"]))
    bundle = laplacian_bundle(graph, fixed_zeta_max=g["fixed_zeta_max"])
    tau = threshold_for(cfg)
    return RunContext(cfg, panel, stations, bundle, {s: tau for s in panel.station_ids}), truth


def fit_window_gpd(values: np.ndarray, split: WindowSplit, ctx: RunContext) -> tuple[dict[str, GpdFit], list[str]]:
    """GP fits on the window's training range; stations that cannot be fitted lose the POT term."""
    a, b = split.train_range
    fits, skipped = {}, []
    for i, sid in enumerate(ctx.panel.station_ids):
        try:
            fits[sid] = fit_gpd(extract_exceedances(values[a:b, i], ctx.thresholds[sid]), ctx.cfg["evt"]["min_exceedances"])
        except (FitError, NumericError) as exc:
            logger.info("window %s station %s: no GP fit (%s)", split.window_id, sid, exc)
            skipped.append(sid)
    return fits, skipped


def _model_config(ctx: RunContext, horizon: int) -> ModelConfig:
    m = ctx.cfg["model"]
    return ModelConfig(
        n_stations=ctx.panel.n_stations,
        horizon=horizon,
        k_layers=m["k_layers"],
        spatial_hidden=m["spatial_hidden"],
        lag=m["lag"],
        hidden=m["hidden"],
        seq_len=m["seq_len"],
        activation=m["activation"],
    )


def _train_config(ctx: RunContext, seed: int) -> TrainConfig:
    t = ctx.cfg["training"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        epochs=t["epochs"],
        seed=seed,
        adam_b1=t["adam_b1"],
        adam_b2=t["adam_b2"],
        adam_eps=t["adam_eps"],
        clip_norm=t["clip_norm"],
        batch_size=t["batch_size"],
    )


def _window_seed(cfg: dict, index: int) -> int:
    return int(np.random.SeedSequence([int(cfg["seed"]), index]).generate_state(1)[0])


def _loss_config(ctx: RunContext, fits, skipped) -> LossConfig:
    return LossConfig(
        1.0,
        0.0,
        thresholds=ctx.thresholds,
        gpd_fits=fits,
        potl_raw_argument=ctx.cfg["evt"]["potl_raw_argument"],
        no_potl=frozenset(skipped),
    )


def ablation_pair(table: list[dict]) -> tuple[float, float]:
    """Best beta2 = 0 grid point by validation RMSE, or (1, 0) if the grid has none."""
    ok = [r for r in table if r["status"] == "ok" and r["beta2"] == 0.0]
    if not ok:
        return (1.0, 0.0)
    best = min(ok, key=lambda r: (r["val_rmse"], -r["beta1"]))
    return (best["beta1"], best["beta2"])


def choose_betas(ctx: RunContext, split: WindowSplit, seed: int, fits, skipped):
    cfg = _model_config(ctx, split.horizon)
    grid = [tuple(p) for p in ctx.cfg["betas"]["grid"]]
    sel = select_betas(
        grid,
        lambda: init_model(cfg, ctx.bundle, seed=seed, station_ids=ctx.panel.station_ids),
        ctx.panel.values,
        split,
        _loss_config(ctx, fits, skipped),
        _train_config(ctx, seed),
    )
    return sel


# ---------------------------------------------------------------------------
# one window


def calibration_residuals(model: EstgcnModel, values: np.ndarray, test_start: int, count: int) -> np.ndarray:
    """Residuals (origins, q, N) of forecasts issued at the last ``count``
    origins whose whole horizon ends before ``test_start``."""
    q, w = model.config.horizon, model.config.window
    last = test_start - q
    first = max(w, last - count + 1)
    if last < first:
        raise InputError(f"no calibration origins before day {test_start}")
    origins = np.arange(first, last + 1)
    x = np.stack([values[o - w : o] for o in origins])
    y = np.stack([values[o : o + q] for o in origins])
    return y - predict_windows(model, x)


def _train_logged(ctx, split, loss_cfg, pair, seed, logs, name) -> EstgcnModel:
    cfg = _model_config(ctx, split.horizon)
    model = init_model(cfg, ctx.bundle, seed=seed, station_ids=ctx.panel.station_ids)
    res: TrainResult = train(model, ctx.panel.values, split, loss_cfg.with_betas(*pair), _train_config(ctx, seed))
    logs[name] = list(res.log_rows())
    return res.model


def run_window(ctx: RunContext, index: int, split: WindowSplit, pair=None, abl=None) -> WindowResult:
    out = WindowResult(split.window_id, split)
    try:
        _run_window(ctx, index, split, pair, abl, out)
    except Exception as exc:  # a failed window is reported, the rest of the run continues
        logger.error("window %s failed: %s", split.window_id, exc)
        out.status = "failed"
        out.error = f"{type(exc).__name__}: {exc}"
        logger.debug(traceback.format_exc())
    return out


def _run_window(ctx: RunContext, index: int, split: WindowSplit, pair, abl, out: WindowResult) -> None:
    cfg = ctx.cfg
    values = ctx.panel.values
    ids = ctx.panel.station_ids
    seed = _window_seed(cfg, index)
    fits, skipped = fit_window_gpd(values, split, ctx)
    out.fits, out.no_potl = fits, skipped
    if pair is None:
        sel = choose_betas(ctx, split, seed, fits, skipped)
        out.beta_table = [dict(r, window_id=split.window_id) for r in sel.table]
        pair, abl = sel.pair, ablation_pair(sel.table)
    out.pair, out.ablation_pair = tuple(pair), tuple(abl)

    loss_cfg = _loss_config(ctx, fits, skipped)
    est = _train_logged(ctx, split, loss_cfg, out.pair, seed, out.logs, "estgcn")
    if out.ablation_pair == out.pair:
        mod = est
    else:
        mod = _train_logged(ctx, split, loss_cfg, out.ablation_pair, seed, out.logs, "modified_stgcn")

    t0, t1 = split.test_range
    q = t1 - t0
    actual = values[t0:t1]
    point = forecast(est, values[:t0])
    preds = {"E-STGCN": point, "modified-STGCN": forecast(mod, values[:t0]), "persistence": np.repeat(values[t0 - 1][None], q, axis=0)}

    ccfg = ConformalConfig(cfg["conformal"]["rho"], cfg["conformal"]["window"], cfg["conformal"]["uncertainty_mode"])
    resid = calibration_residuals(est, values, t0, ccfg.window)
    mcfg = cfg["metrics"]
    rng = np.random.default_rng(seed)
    a, b = split.train_range
    for i, sid in enumerate(ids):
        ens = np.empty((q, mcfg["crps_samples"]))
        for h in range(q):
            r = resid[:, h, i]
            u = uncertainty_scale(r, ccfg.uncertainty_mode)
            kappa = conformal_quantile(conformal_score(r, 0.0, u), ccfg)
            iv = conformal_interval(point[h, i], kappa, u)
            out.interval_rows.append(
                {"window_id": split.window_id, "station_id": sid, "step": h + 1, "point": iv.point,
                 "lower": iv.lower, "upper": iv.upper, "kappa": iv.kappa}
            )
            ens[h] = point[h, i] + rng.choice(r, size=mcfg["crps_samples"], replace=True)
            out.forecast_rows.append(
                {"window_id": split.window_id, "station_id": sid, "step": h + 1,
                 "date": str(ctx.panel.timestamps[t0 + h]), "actual": actual[h, i],
                 "estgcn": point[h, i], "modified_stgcn": preds["modified-STGCN"][h, i],
                 "persistence": preds["persistence"][h, i]}
            )
        rep = metric_report(actual[:, i], point[:, i], values[a:b, i], ens, mcfg["pinball_rho"])
        out.metric_rows.append({"window_id": split.window_id, "station_id": sid, **rep.row()})
        for name, fc in preds.items():
            out.model_metric_rows.append(
                {"window_id": split.window_id, "station_id": sid, "model": name,
                 "mae": mae(actual[:, i], fc[:, i]),
                 "rmse": float(np.sqrt(np.mean((actual[:, i] - fc[:, i]) ** 2)))}
            )
    out.actual = actual.T.copy()
    out.forecasts = {k: v.T.copy() for k, v in preds.items()}
    out.checkpoint = f"models/{split.window_id}.json"
    out.model = est


# ---------------------------------------------------------------------------
# whole run


def _window_task(args):
    return run_window(*args)


def run_experiment(cfg: dict, out_dir: str | Path | None = None) -> ResultBundle:
    """Run every rolling window of the configured scheme and write the bundle.

    Raises for setup failures (bad data, no feasible windows, beta selection
    impossible); failures inside a window are recorded in the bundle.
    """
    ctx, truth = build_context(cfg)
    w = cfg["windows"]
    splits = rolling_windows(ctx.panel.n_days, w["scheme"], w["anchor"], w["test_days"], w["val_days"])

    pair = abl = None
    scheme_table: list[dict] = []
    if cfg["betas"]["selection"] == "per_scheme":
        first = splits[0]
        fits, skipped = fit_window_gpd(ctx.panel.values, first, ctx)
        sel = choose_betas(ctx, first, _window_seed(cfg, 0), fits, skipped)
        scheme_table = [dict(r, window_id=f"{w['scheme']}-scheme") for r in sel.table]
        pair, abl = sel.pair, ablation_pair(sel.table)

    tasks = [(ctx, i, s, pair, abl) for i, s in enumerate(splits)]
    workers = int(cfg["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_window_task, tasks))
    else:
        outcomes = [_window_task(t) for t in tasks]
    results = outcomes

    manifest = build_manifest(cfg, ctx, splits, results, truth)
    bundle = ResultBundle(manifest, results, scheme_table + [row for r in results for row in r.beta_table])
    if out_dir is not None:
        write_bundle(bundle, ctx, out_dir)
    return bundle


def build_manifest(cfg, ctx: RunContext, splits, results, truth) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "package_version": __version__,
        "config": cfg,
        "seed": int(cfg["seed"]),
        "pollutant": cfg["pollutant"],
        "thresholds": ctx.thresholds,
        "scheme": cfg["windows"]["scheme"],
        "beta_selection_scope": cfg["betas"]["selection"],
        "uncertainty_mode": cfg["conformal"]["uncertainty_mode"],
        "crps_ensemble": f"point forecast plus bootstrap calibration residuals, S={cfg['metrics']['crps_samples']}",
        "stations": ctx.panel.station_ids,
        "dropped_stations": list(ctx.panel.dropped),
        "graph_warnings": list(build_adjacency_warnings(ctx)),
        "synthetic_truth": truth,
        "windows": [
            {
                "window_id": r.window_id,
                "train_range": list(r.split.train_range),
                "val_range": list(r.split.val_range),
                "test_range": list(r.split.test_range),
                "beta1": r.pair[0] if r.pair else None,
                "beta2": r.pair[1] if r.pair else None,
                "ablation_beta1": r.ablation_pair[0] if r.ablation_pair else None,
                "ablation_beta2": r.ablation_pair[1] if r.ablation_pair else None,
                "no_potl_stations": r.no_potl,
                "status": r.status,
                "error": r.error,
            }
            for r in results
        ],
        "artifacts": {
            "panel": "panel.csv",
            "roster": "roster.csv",
            "gpd_fits": "gpd_fits.json",
            "metrics": "metrics.csv",
            "model_metrics": "model_metrics.csv",
            "forecasts": "forecasts.csv",
            "intervals": "intervals.csv",
            "beta_selection": "beta_selection.csv",
            "dm": "dm.csv",
            "mcb": "mcb.csv",
            "models": "models/",
            "logs": "logs/",
        },
    }


def build_adjacency_warnings(ctx: RunContext):
    mask = ctx.bundle.aggregator.sum(axis=1) == 0
    if mask.any():
        yield f"isolated stations: {[s for s, m in zip(ctx.panel.station_ids, mask) if m]}"


def comparisons(results: list[WindowResult], station_ids: list[str], theta: float):
    ok = [r for r in results if r.status == "ok"]
    dm_rows, mcb = [], None
    if ok:
        for i, sid in enumerate(station_ids):
            y = np.concatenate([r.actual[i] for r in ok])
            a = np.concatenate([r.forecasts["modified-STGCN"][i] for r in ok])
            b = np.concatenate([r.forecasts["E-STGCN"][i] for r in ok])
            if y.size >= 2:
                dm_rows.append((sid, dm_test(y, a, b)))
        losses = [[mae(r.actual[i], r.forecasts[m][i]) for m in MODELS] for r in ok for i in range(len(station_ids))]
        if len(losses) >= 2:
            mcb = mcb_test(np.array(losses), MODELS, theta)
    return dm_rows, mcb


def write_bundle(bundle: ResultBundle, ctx: RunContext, out_dir) -> None:
    out = Path(out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    results = bundle.windows
    write_panel_csv(out / "panel.csv", ctx.panel)
    write_roster_csv(out / "roster.csv", ctx.stations)
    fits = {
        r.window_id: {
            sid: (r.fits[sid].to_dict() if sid in r.fits else None) for sid in ctx.panel.station_ids
        }
        for r in results
        if r.fits or r.status == "ok"
    }
    (out / "gpd_fits.json").write_text(json.dumps(fits, indent=2))
    write_metrics_csv(out / "metrics.csv", (row for r in results for row in r.metric_rows))
    write_csv(
        out / "model_metrics.csv",
        ["window_id", "station_id", "model", "mae", "rmse"],
        (row for r in results for row in r.model_metric_rows),
    )
    write_csv(out / "forecasts.csv", FORECAST_COLUMNS, (row for r in results for row in r.forecast_rows))
    write_csv(out / "intervals.csv", INTERVAL_COLUMNS, (row for r in results for row in r.interval_rows))
    write_csv(out / "beta_selection.csv", BETA_COLUMNS, bundle.beta_rows)
    dm_rows, mcb = comparisons(results, ctx.panel.station_ids, ctx.cfg["metrics"]["mcb_theta"])
    write_dm_csv(out / "dm.csv", dm_rows)
    write_mcb_csv(out / "mcb.csv", mcb)
    for r in results:
        for name, rows in r.logs.items():
            write_csv(out / "logs" / f"{r.window_id}_{name}.csv", LOG_COLUMNS, rows)
        if r.model is not None:
            save_checkpoint(r.model, out / r.checkpoint)
    (out / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2))
    bundle.out_dir = out


def bundle_digest(out_dir: str | Path) -> str:
    """SHA-256 over every deterministic file of a bundle (``logs/`` excluded: it holds wall times)."""
    root = Path(out_dir)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root)
        if rel.parts[0] == "logs":
            continue
        h.update(str(rel).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# plot data


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Plain CSVs for forecast-vs-actual lines, mean-excess curves and MCB ranks.

    Missing inputs give header-only files.
    """
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run / "plots"
    out.mkdir(parents=True, exist_ok=True)

    fva = [
        {"window_id": r["window_id"], "station_id": r["station_id"], "date": r["date"],
         "actual": r["actual"], "forecast": r["estgcn"]}
        for r in _read_rows(run / "forecasts.csv")
    ]
    iv = {(r["window_id"], r["station_id"], r["step"]): r for r in _read_rows(run / "intervals.csv")}
    for row, src in zip(fva, _read_rows(run / "forecasts.csv")):
        hit = iv.get((src["window_id"], src["station_id"], src["step"]))
        row["lower"] = hit["lower"] if hit else ""
        row["upper"] = hit["upper"] if hit else ""
    paths = [out / "forecast_vs_actual.csv", out / "mean_excess.csv", out / "mcb_ranks.csv"]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["window_id", "station_id", "date", "actual", "forecast", "lower", "upper"])
        w.writeheader()
        w.writerows(fva)

    me_rows = []
    if (run / "panel.csv").exists():
        panel = load_panel_csv(run / "panel.csv", max_gap=0, missing_frac=1.0)
        for sid in panel.station_ids:
            x = panel.column(sid)
            curve = mean_excess_curve(x, default_grid(x))
            for t, m, c, n in zip(curve.grid, curve.me, curve.ci_half_width, curve.counts):
                me_rows.append({"station_id": sid, "threshold": t, "mean_excess": m, "ci_half_width": c, "count": int(n)})
    write_csv(paths[1], ["station_id", "threshold", "mean_excess", "ci_half_width", "count"], me_rows)

    mcb_rows = _read_rows(run / "mcb.csv")
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["model", "mean_rank", "lower", "upper", "in_reference"])
        w.writeheader()
        for r in mcb_rows:
            rank, cd = float(r["mean_rank"]), float(r["cd"])
            w.writerow({"model": r["model"], "mean_rank": r["mean_rank"], "lower": repr(rank - cd),
                        "upper": repr(rank + cd), "in_reference": r["in_reference"]})
    return paths
