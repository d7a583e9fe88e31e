"""Point and probabilistic forecast scores, the Diebold-Mariano test and
multiple comparison with the best (MCB)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, stats

from .errors import InputError, NumericError


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mase: float
    rmse: float
    smape: float
    pinball: float
    crps: float
    quantile_rho: float
    horizon: int
    train_len: int

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("mae", "mase", "rmse", "smape", "pinball", "crps")}


def _pair(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(forecast, dtype=float).ravel()
    if y.shape != f.shape:
        raise InputError(f"length mismatch: {y.size} actual vs {f.size} forecast values")
    if y.size == 0:
        raise InputError("need at least one value")
    return y, f


def mae(actual, forecast) -> float:
    y, f = _pair(actual, forecast)
    return float(np.mean(np.abs(y - f)))


def rmse(actual, forecast) -> float:
    y, f = _pair(actual, forecast)
    return float(np.sqrt(np.mean((y - f) ** 2)))


def mase(actual, forecast, train_series) -> float:
    """Absolute error scaled by the in-sample one-step naive error.

    ``sum|e| / ((q / (T - 1)) * sum|X_t - X_{t-1}|)``; NaN for a constant
    training series.
    """
    y, f = _pair(actual, forecast)
    x = np.asarray(train_series, dtype=float).ravel()
    if x.size < 2:
        raise InputError("training series needs at least 2 values")
    denom = y.size / (x.size - 1) * np.sum(np.abs(np.diff(x)))
    if denom == 0:
        return math.nan
    return float(np.sum(np.abs(y - f)) / denom)


def smape(actual, forecast) -> float:
    """Symmetric MAPE in percent; terms with both values zero count as 0."""
    y, f = _pair(actual, forecast)
    num = 2.0 * np.abs(f - y)
    den = np.abs(f) + np.abs(y)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * np.mean(terms))


def pinball(actual, forecast, rho: float = 0.8) -> float:
    """Quantile loss ``max(rho * d, (rho - 1) * d)`` with ``d = y - forecast``."""
    if not 0.0 < rho < 1.0:
        raise InputError(f"rho must lie in (0, 1), got {rho}")
    y, f = _pair(actual, forecast)
    d = y - f
    return float(np.mean(np.maximum(rho * d, (rho - 1.0) * d)))


def crps_ensemble(actual, ensemble) -> float:
    """Sample CRPS ``mean|X - y| - 0.5 mean|X - X'|``, averaged over steps.

    ``ensemble`` has one row of S >= 2 samples per actual value. The pair term
    uses the sorted-sample identity so the cost is O(S log S) per step.
    """
    y = np.asarray(actual, dtype=float).ravel()
    ens = np.asarray(ensemble, dtype=float)
    if ens.ndim == 1:
        ens = ens[None, :]
    if ens.shape[0] != y.size:
        raise InputError(f"{y.size} actual values but {ens.shape[0]} ensemble rows")
    s = ens.shape[1]
    if s < 2:
        raise InputError(f"need at least 2 ensemble members, got {s}")
    first = np.mean(np.abs(ens - y[:, None]), axis=1)
    xs = np.sort(ens, axis=1)
    weights = 2.0 * np.arange(1, s + 1) - s - 1
    half_pair = xs @ weights / (s * s)
    return float(np.mean(first - half_pair))


def residual_ensemble(point, residuals, n_samples: int = 200, rng: np.random.Generator | None = None) -> np.ndarray:
    """Point forecasts plus bootstrap-resampled residuals, shape (len(point), n_samples)."""
    point = np.asarray(point, dtype=float).ravel()
    res = np.asarray(residuals, dtype=float).ravel()
    if res.size == 0:
        raise InputError("no residuals to resample")
    rng = rng or np.random.default_rng(0)
    return point[:, None] + rng.choice(res, size=(point.size, n_samples), replace=True)


def metric_report(
    actual, forecast, train_series, ensemble, rho: float = 0.8
) -> MetricReport:
    y, f = _pair(actual, forecast)
    return MetricReport(
        mae=mae(y, f),
        mase=mase(y, f, train_series),
        rmse=rmse(y, f),
        smape=smape(y, f),
        pinball=pinball(y, f, rho),
        crps=crps_ensemble(y, ensemble),
        quantile_rho=rho,
        horizon=y.size,
        train_len=int(np.asarray(train_series).size),
    )


# ---------------------------------------------------------------------------
# Diebold-Mariano


@dataclass(frozen=True)
class DmResult:
    statistic: float
    mean_diff: float
    sd_diff: float
    p_value: float
    defined: bool


def dm_test(actual, fc_a, fc_b) -> DmResult:
    """One-sided DM test on absolute-error differentials ``|e_A| - |e_B|``.

    A positive statistic favours forecaster B. When the differential has no
    spread the statistic is undefined: ``defined`` is False and the
    statistic and p-value are NaN.
    """
    y, a = _pair(actual, fc_a)
    _, b = _pair(actual, fc_b)
    if y.size < 2:
        raise InputError("DM test needs at least 2 forecast steps")
    lam = np.abs(y - a) - np.abs(y - b)
    mu = float(np.mean(lam))
    sd = float(np.std(lam, ddof=1))
    # rounding leaves a tiny spread on constant differentials; treat it as zero
    if sd <= 1e-12 * (1.0 + float(np.max(np.abs(lam)))):
        return DmResult(math.nan, mu, sd, math.nan, False)
    stat = math.sqrt(y.size) * mu / sd
    return DmResult(stat, mu, sd, float(stats.norm.sf(stat)), True)


# ---------------------------------------------------------------------------
# MCB


def studentized_range_cdf(q: float, k: int) -> float:
    """P(range of k iid standard normals <= q), i.e. infinite degrees of freedom."""
    if q <= 0:
        return 0.0
    norm = stats.norm

    def integrand(z):
        return norm.pdf(z) * (norm.cdf(z + q) - norm.cdf(z)) ** (k - 1)

    val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    return k * val


@lru_cache(maxsize=None)
def studentized_range_quantile(k: int, theta: float = 0.05) -> float:
    """Upper-``theta`` critical value of the studentized range with k groups, df = inf."""
    if k < 2:
        raise InputError("need at least 2 groups")
    if not 0.0 < theta < 1.0:
        raise InputError(f"theta must lie in (0, 1), got {theta}")
    target = 1.0 - theta
    hi = 1.0
    while studentized_range_cdf(hi, k) < target:
        hi *= 2.0
        if hi > 1e3:
            raise NumericError("studentized range quantile bracket failed")
    return float(optimize.brentq(lambda q: studentized_range_cdf(q, k) - target, 0.0, hi, xtol=1e-12))


@dataclass(frozen=True)
class McbResult:
    models: tuple[str, ...]
    mean_ranks: np.ndarray
    critical_distance: float
    reference_interval: tuple[float, float]
    theta: float
    best: str

    def in_reference(self) -> np.ndarray:
        """Models whose mean rank lies inside the best model's interval."""
        return self.mean_ranks <= self.reference_interval[1]


def average_ranks(row: np.ndarray) -> np.ndarray:
    return stats.rankdata(row, method="average")


def mcb_test(losses, models: Sequence[str] | None = None, theta: float = 0.05) -> McbResult:
    """Rank F models on each of D datasets (1 = lowest loss) and compare with the best.

    ``CD = delta * sqrt(F (F + 1) / (6 D))`` with delta the studentized-range
    critical value at level ``theta``.
    """
    L = np.asarray(losses, dtype=float)
    if L.ndim != 2:
        raise InputError("losses must be a D x F matrix")
    d, f = L.shape
    if d < 2 or f < 2:
        raise InputError(f"need at least 2 datasets and 2 models, got {d} x {f}")
    if np.any(np.isnan(L)):
        raise InputError("loss matrix contains NaN")
    names = tuple(models) if models is not None else tuple(f"model{j + 1}" for j in range(f))
    if len(names) != f:
        raise InputError("model names do not match the loss matrix columns")
    ranks = np.vstack([average_ranks(r) for r in L])
    mean_ranks = ranks.mean(axis=0)
    cd = studentized_range_quantile(f, theta) * math.sqrt(f * (f + 1) / (6.0 * d))
    b = int(np.argmin(mean_ranks))
    best = float(mean_ranks[b])
    return McbResult(names, mean_ranks, cd, (best - cd, best + cd), theta, names[b])


# ---------------------------------------------------------------------------
# CSV output

METRIC_COLUMNS = ["window_id", "station_id", "mae", "mase", "rmse", "smape", "pinball", "crps"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    write_csv(path, METRIC_COLUMNS, rows)


def write_dm_csv(path, results: Sequence[tuple[str, DmResult]]) -> None:
    write_csv(
        path,
        ["station_id", "statistic", "p_value", "defined"],
        ({"station_id": s, "statistic": r.statistic, "p_value": r.p_value, "defined": r.defined} for s, r in results),
    )


def write_mcb_csv(path, result: McbResult | None) -> None:
    rows = []
    if result is not None:
        inside = result.in_reference()
        rows = [
            {"model": m, "mean_rank": float(r), "cd": result.critical_distance, "in_reference": bool(i)}
            for m, r, i in zip(result.models, result.mean_ranks, inside)
        ]
    write_csv(path, ["model", "mean_rank", "cd", "in_reference"], rows)
