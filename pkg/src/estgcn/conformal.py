"""Windowed split-conformal intervals around point forecasts.

Scores are scaled absolute residuals ``|y - yhat| / u``. The interval at
time t uses the empirical (1 - rho) quantile of the most recent ``window``
scores, with the higher order statistic at index ``ceil((1 - rho) n)``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

UNCERTAINTY_MODES = ("constant", "residual-scale")


@dataclass(frozen=True)
class ConformalConfig:
    rho: float = 0.2
    window: int = 200
    uncertainty_mode: str = "residual-scale"

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise InputError(f"rho must lie in (0, 1), got {self.rho}")
        if self.window < 1:
            raise InputError(f"window must be >= 1, got {self.window}")
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise InputError(f"uncertainty_mode must be one of {UNCERTAINTY_MODES}")


@dataclass(frozen=True)
class IntervalForecast:
    point: float
    lower: float
    upper: float
    kappa: float

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def conformal_score(actual, point_forecast, u) -> np.ndarray | float:
    u_arr = np.asarray(u, dtype=float)
    if np.any(~(u_arr > 0)):
        raise InputError("uncertainty scale must be > 0")
    out = np.abs(np.asarray(actual, dtype=float) - np.asarray(point_forecast, dtype=float)) / u_arr
    return float(out) if out.ndim == 0 else out


def conformal_quantile(scores: Sequence[float], cfg: ConformalConfig) -> float:
    """Order statistic ``ceil((1 - rho) n)`` of the last ``min(window, len)`` scores."""
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise InputError("conformal window is empty")
    recent = np.sort(s[-cfg.window:])
    n = recent.size
    # guard against 0.8 * 10 evaluating to 8.000000000000002
    k = math.ceil(round((1.0 - cfg.rho) * n, 9))
    return float(recent[min(max(k, 1), n) - 1])


def conformal_interval(point: float, kappa: float, u: float) -> IntervalForecast:
    if not u > 0:
        raise InputError(f"uncertainty scale must be > 0, got {u}")
    if not kappa >= 0:
        raise InputError(f"kappa must be >= 0, got {kappa}")
    half = kappa * u
    return IntervalForecast(float(point), float(point - half), float(point + half), float(kappa))


def uncertainty_scale(residuals: Sequence[float], mode: str = "residual-scale") -> float:
    """1 in constant mode; otherwise the median absolute residual (1 if that is 0)."""
    if mode == "constant":
        return 1.0
    if mode != "residual-scale":
        raise InputError(f"unknown uncertainty mode {mode!r}")
    r = np.abs(np.asarray(residuals, dtype=float).ravel())
    if r.size == 0:
        raise InputError("no residuals for the uncertainty scale")
    med = float(np.median(r))
    return med if med > 0 else 1.0


class ConformalStream:
    """Online intervals for one series: call :meth:`interval` before the
    actual is known, then :meth:`update` once it arrives."""

    def __init__(self, cfg: ConformalConfig, u: float = 1.0):
        self.cfg = cfg
        self.u = u
        self.scores: deque[float] = deque(maxlen=cfg.window)

    def interval(self, point: float) -> IntervalForecast:
        return conformal_interval(point, conformal_quantile(list(self.scores), self.cfg), self.u)

    def update(self, actual: float, point: float) -> None:
        self.scores.append(conformal_score(actual, point, self.u))


def stream_coverage(actual: Iterable[float], point: Iterable[float], cfg: ConformalConfig, u: float = 1.0) -> float:
    """Fraction of points covered when intervals are issued online.

    The first ``cfg.window`` points only seed the score history.
    """
    y = np.asarray(list(actual), dtype=float)
    f = np.asarray(list(point), dtype=float)
    if y.shape != f.shape:
        raise InputError("actual and point lengths differ")
    if y.size <= cfg.window:
        raise InputError("stream is not longer than the calibration window")
    stream = ConformalStream(cfg, u)
    hits = 0
    for t in range(y.size):
        if t >= cfg.window:
            hits += stream.interval(f[t]).covers(y[t])
        stream.update(y[t], f[t])
    return hits / (y.size - cfg.window)
