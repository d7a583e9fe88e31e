"""Hybrid loss, Adam training loop, beta selection and rolling evaluation windows.

The hybrid loss is squared error for predictions at or below a station's
threshold and ``beta1 * SE + beta2 * POTL`` above it, with POTL the GP negative
log-likelihood of the predicted exceedance. Threshold gating always happens in
data units, after de-normalising the network output.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError, NumericError
from .evt import SHAPE_ZERO_TOL, GpdFit, pot_loss, potl_boundary
from .model import EstgcnModel, NormStats, denormalize_tape, forward_tape, parameter_variables, predict_windows

logger = logging.getLogger(__name__)

SCHEMES = {"short": 12, "medium": 6, "long": 4}
DEFAULT_BETA_GRID = tuple((b1, b2) for b1 in (0.5, 1.0) for b2 in (0.0, 0.1, 0.5, 1.0))


@dataclass(frozen=True)
class LossConfig:
    beta1: float = 1.0
    beta2: float = 0.0
    thresholds: Mapping[str, float] = field(default_factory=dict)
    gpd_fits: Mapping[str, GpdFit] = field(default_factory=dict)
    potl_raw_argument: bool = False
    #: stations whose POT term is switched off (too few exceedances to fit)
    no_potl: frozenset = frozenset()

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0 or self.beta1 + self.beta2 <= 0:
            raise ConfigError(f"need beta1, beta2 >= 0 with a positive sum, got ({self.beta1}, {self.beta2})")
        if self.beta2 > 0:
            missing = [s for s in self.thresholds if s not in self.gpd_fits and s not in self.no_potl]
            if missing:
                raise ConfigError(f"beta2 > 0 but no GP fit for stations {missing}")

    def with_betas(self, beta1: float, beta2: float) -> "LossConfig":
        return replace(self, beta1=float(beta1), beta2=float(beta2))

    def uses_potl(self, station: str) -> bool:
        return self.beta2 > 0 and station not in self.no_potl


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class WindowSplit:
    """Half-open index ranges over the panel rows."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    window_id: str = "w0"

    def __post_init__(self):
        (a, b), (c, d), (e, f) = self.train_range, self.val_range, self.test_range
        if not (0 <= a < b <= c < d <= e < f):
            raise InputError(f"split ranges must be ordered and non-empty: {self}")

    @property
    def horizon(self) -> int:
        return self.test_range[1] - self.test_range[0]


@dataclass
class TrainResult:
    model: EstgcnModel
    train_loss: list[float]
    val_loss: list[float]
    wall_ms: list[float]

    def log_rows(self):
        for e, (tl, vl, ms) in enumerate(zip(self.train_loss, self.val_loss, self.wall_ms), start=1):
            yield {"epoch": e, "train_loss": tl, "val_loss": vl, "wall_ms": ms}


# ---------------------------------------------------------------------------
# loss


def hybrid_loss(pred: float, target: float, station: str, cfg: LossConfig) -> float:
    """Piecewise loss of one prediction in data units."""
    if station not in cfg.thresholds:
        raise ConfigError(f"no threshold for station {station!r}")
    tau = cfg.thresholds[station]
    se = (pred - target) ** 2
    if pred <= tau:
        return se
    if not cfg.uses_potl(station):
        return cfg.beta1 * se
    fit = cfg.gpd_fits.get(station)
    if fit is None:
        raise ConfigError(f"no GP fit for station {station!r}")
    return cfg.beta1 * se + cfg.beta2 * pot_loss(pred, replace(fit, threshold=tau), cfg.potl_raw_argument)


def _potl_constants(cfg: LossConfig, stations: Sequence[str]):
    """Per-station arrays driving the vectorised POT loss."""
    n = len(stations)
    tau = np.array([cfg.thresholds[s] for s in stations], dtype=float)
    enabled = np.array([cfg.uses_potl(s) for s in stations])
    log_s, c1, ratio, lin, bound, fb, db = (np.zeros(n) for _ in range(7))
    bound[:] = np.inf
    for i, s in enumerate(stations):
        if not enabled[i]:
            continue
        fit = cfg.gpd_fits.get(s)
        if fit is None:
            raise ConfigError(f"no GP fit for station {s!r}")
        sc, xi = fit.scale, fit.shape
        log_s[i] = math.log(sc)
        if abs(xi) < SHAPE_ZERO_TOL:
            lin[i] = 1.0 / sc
        else:
            c1[i] = 1.0 + 1.0 / xi
            ratio[i] = xi / sc
        bound[i] = potl_boundary(sc, xi)
        if math.isfinite(bound[i]):
            u = 1.0 + ratio[i] * bound[i]
            fb[i] = log_s[i] + c1[i] * math.log(u)
            db[i] = abs((1.0 + xi) / (sc * u))
    return tau, enabled, log_s, c1, ratio, lin, bound, fb, db


def hybrid_loss_tape(pred: ad.Variable, target: np.ndarray, stations: Sequence[str], cfg: LossConfig) -> ad.Variable:
    """Mean hybrid loss over every (sample, step, station) entry of ``pred`` (..., N)."""
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise InputError(f"prediction shape {pred.shape} != target shape {target.shape}")
    missing = [s for s in stations if s not in cfg.thresholds]
    if missing:
        raise ConfigError(f"no threshold for stations {missing}")
    tau, enabled, log_s, c1, ratio, lin, bound, fb, db = _potl_constants(cfg, stations)
    shape = pred.shape
    full = lambda a: np.broadcast_to(a, shape).copy()

    pv = pred.value
    above = pv > tau
    diff = ad.sub(pred, target)
    se = ad.mul(diff, diff)
    weight = np.where(above, cfg.beta1, 1.0)
    loss = ad.mul(se, weight)

    if cfg.beta2 > 0 and np.any(above & enabled):
        arg = pv if cfg.potl_raw_argument else pv - tau
        active = above & enabled
        inside = active & (arg < bound)
        outside = active & ~(arg < bound)
        arg_var = pred if cfg.potl_raw_argument else ad.sub(pred, tau)
        # zero the argument off the support so the log stays finite there
        safe = ad.mul(arg_var, inside.astype(float))
        logterm = ad.log(ad.add(ad.mul(safe, full(ratio)), np.ones(shape)))
        f_in = ad.add(ad.add(ad.mul(logterm, full(c1)), ad.mul(safe, full(lin))), log_s)
        potl = ad.mul(f_in, inside.astype(float))
        if np.any(outside):
            finite_bound = np.where(np.isfinite(bound), bound, 0.0)
            over = ad.sub(ad.mul(arg_var, outside.astype(float)), full(finite_bound) * outside)
            f_out = ad.add(ad.mul(over, full(db)), full(fb) * outside)
            potl = ad.add(potl, f_out)
        loss = ad.add(loss, ad.scale(potl, cfg.beta2))
    return ad.mean(loss)


def panel_hybrid_loss(pred: np.ndarray, target: np.ndarray, stations: Sequence[str], cfg: LossConfig) -> float:
    """Scalar-loop reference of :func:`hybrid_loss_tape` (mean over entries)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    total = 0.0
    for idx in np.ndindex(pred.shape):
        total += hybrid_loss(float(pred[idx]), float(target[idx]), stations[idx[-1]], cfg)
    return total / pred.size


# ---------------------------------------------------------------------------
# samples


def make_samples(values: np.ndarray, target_range: tuple[int, int], window: int, horizon: int):
    """Input windows and q-step targets whose targets lie inside ``target_range``.

    Inputs may reach back before the range start (earlier data only).
    """
    start, stop = target_range
    origins = [o for o in range(max(start, window), stop - horizon + 1)]
    if not origins:
        return np.empty((0, window, values.shape[1])), np.empty((0, horizon, values.shape[1])), []
    x = np.stack([values[o - window : o] for o in origins])
    y = np.stack([values[o : o + horizon] for o in origins])
    return x, y, origins


def _clip(grads: dict[str, np.ndarray], bound: float) -> None:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if bound > 0 and norm > bound:
        factor = bound / norm
        for g in grads.values():
            g *= factor


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_b1**self.t
        bc2 = 1.0 - c.adam_b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.adam_b1 * self.m[k] + (1 - c.adam_b1) * g
            self.v[k] = c.adam_b2 * self.v[k] + (1 - c.adam_b2) * g * g
            p -= c.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


def loss_and_grads(model: EstgcnModel, x_raw: np.ndarray, y_raw: np.ndarray, loss_cfg: LossConfig):
    tape = ad.Tape()
    P = parameter_variables(tape, model)
    x = (x_raw - model.norm_stats.mean) / model.norm_stats.std
    pred = denormalize_tape(forward_tape(model, P, x), model.norm_stats)
    loss = hybrid_loss_tape(pred, y_raw, model.station_ids, loss_cfg)
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in P.items()}


def train(
    model: EstgcnModel,
    values: np.ndarray,
    split: WindowSplit,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    refit_norm: bool = True,
) -> TrainResult:
    """Mini-batch Adam on sliding (window -> horizon) samples from the training range.

    The model is updated in place and also returned inside the result.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] != model.graph.n:
        raise InputError("panel values must be T x N with N matching the model graph")
    if split.val_range[1] > values.shape[0]:
        raise InputError("split extends beyond the panel")
    a, b = split.train_range
    if not np.all(np.isfinite(values[: split.val_range[1]])):
        raise InputError("panel contains missing values inside the train/validation ranges")
    if refit_norm:
        model.norm_stats = NormStats.fit(values[a:b])
    cfg = model.config
    x_tr, y_tr, _ = make_samples(values, split.train_range, cfg.window, cfg.horizon)
    x_va, y_va, _ = make_samples(values, split.val_range, cfg.window, cfg.horizon)
    if len(x_tr) == 0:
        raise InputError(f"training range {split.train_range} yields no samples for window {cfg.window} and horizon {cfg.horizon}")

    params = model.parameters()
    opt = Adam(params, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    history = TrainResult(model, [], [], [])
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_tr))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            try:
                loss, grads = loss_and_grads(model, x_tr[idx], y_tr[idx], loss_cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}{_offending_station(model, x_tr[idx])}") from exc
            if not math.isfinite(loss):
                raise NumericError(f"epoch {epoch}, batch {bi}: loss is {loss}")
            _clip(grads, train_cfg.clip_norm)
            opt.step(params, grads)
            total += loss * len(idx)
        history.train_loss.append(total / len(x_tr))
        history.val_loss.append(evaluate_loss(model, x_va, y_va, loss_cfg) if len(x_va) else math.nan)
        history.wall_ms.append((time.perf_counter() - t0) * 1e3)
    return history


def _offending_station(model: EstgcnModel, x: np.ndarray) -> str:
    with np.errstate(all="ignore"):
        y = predict_windows_unchecked(model, x)
    bad = np.flatnonzero(~np.all(np.isfinite(y), axis=(0, 1)))
    return f" (offending station {model.station_ids[bad[0]]})" if bad.size else ""


def predict_windows_unchecked(model: EstgcnModel, x: np.ndarray) -> np.ndarray:
    try:
        return predict_windows(model, x)
    except NumericError:
        return np.full((x.shape[0], model.config.horizon, x.shape[2]), np.nan)


def evaluate_loss(model: EstgcnModel, x: np.ndarray, y: np.ndarray, loss_cfg: LossConfig) -> float:
    tape = ad.Tape()
    pred = tape.constant(predict_windows(model, x))
    return float(hybrid_loss_tape(pred, y, model.station_ids, loss_cfg).value)


def validation_rmse(model: EstgcnModel, values: np.ndarray, split: WindowSplit) -> float:
    x, y, _ = make_samples(values, split.val_range, model.config.window, model.config.horizon)
    if len(x) == 0:
        raise InputError(f"validation range {split.val_range} is shorter than the horizon")
    pred = predict_windows(model, x)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


# ---------------------------------------------------------------------------
# beta selection


@dataclass
class BetaSelection:
    beta1: float
    beta2: float
    table: list[dict]
    result: TrainResult

    @property
    def pair(self) -> tuple[float, float]:
        return self.beta1, self.beta2


def select_betas(
    grid: Sequence[tuple[float, float]],
    model_factory: Callable[[], EstgcnModel],
    values: np.ndarray,
    split: WindowSplit,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
) -> BetaSelection:
    """Train one fresh model per (beta1, beta2) and keep the lowest validation RMSE.

    Ties go to the larger beta2, then the larger beta1. Grid points whose
    training fails are recorded with status ``failed`` and skipped.
    """
    grid = [(float(b1), float(b2)) for b1, b2 in grid]
    if not grid:
        raise InputError("beta grid is empty")
    table, results = [], {}
    for b1, b2 in grid:
        try:
            res = train(model_factory(), values, split, loss_cfg.with_betas(b1, b2), train_cfg)
            rmse = validation_rmse(res.model, values, split)
            if not math.isfinite(rmse):
                raise NumericError("validation RMSE is not finite")
            table.append({"beta1": b1, "beta2": b2, "val_rmse": rmse, "status": "ok"})
            results[(b1, b2)] = res
        except (NumericError, ConfigError, InputError) as exc:
            logger.warning("beta grid point (%s, %s) failed: %s", b1, b2, exc)
            table.append({"beta1": b1, "beta2": b2, "val_rmse": math.nan, "status": "failed"})
    ok = [r for r in table if r["status"] == "ok"]
    if not ok:
        raise NumericError("every beta grid point failed to train")
    best = min(ok, key=lambda r: (r["val_rmse"], -r["beta2"], -r["beta1"]))
    pair = (best["beta1"], best["beta2"])
    return BetaSelection(pair[0], pair[1], table, results[pair])


# ---------------------------------------------------------------------------
# rolling windows


def rolling_windows(
    total_days: int,
    scheme: str,
    anchor: int | None = None,
    test_days: int = 365,
    val_days: int | None = None,
    min_train: int = 1,
) -> list[WindowSplit]:
    """Consecutive, equal-length test windows covering the test span.

    The test span starts at ``anchor`` (default ``total_days - test_days``) and
    runs to the end of the series; it is cut into 12, 6 or 4 windows for the
    short, medium and long schemes, any remainder days being left unused. Each
    window validates on the ``val_days`` (default: one horizon) right before
    its test range and trains on everything earlier.
    """
    if scheme not in SCHEMES:
        raise InputError(f"scheme must be one of {sorted(SCHEMES)}, got {scheme!r}")
    n_windows = SCHEMES[scheme]
    if anchor is None:
        anchor = total_days - test_days
    span = total_days - anchor
    if anchor < 0 or span < n_windows:
        raise InputError(f"{total_days} days cannot hold {n_windows} {scheme} test windows from index {anchor}")
    q = span // n_windows
    v = q if val_days is None else val_days
    out = []
    for w in range(n_windows):
        t0 = anchor + w * q
        v0 = t0 - v
        if v0 - min_train < 0 or v < 1:
            raise InputError(
                f"window {w + 1} ({scheme}): test starts at day {t0} but needs {v} validation and "
                f">= {min_train} training days before it"
            )
        out.append(WindowSplit((0, v0), (v0, t0), (t0, t0 + q), window_id=f"{scheme}-{w + 1:02d}"))
    return out
