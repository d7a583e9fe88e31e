"""Extreme-value statistics for threshold exceedances.

Covers block maxima extraction, peaks-over-threshold exceedances, the
generalized Pareto (GP) law and its maximum-likelihood fit, the mean excess
curve used for threshold diagnostics, the Durbin-Watson lag-1 statistic and
the per-prediction GP negative log-likelihood used as a training penalty.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import FitError, InputError, OptimizerDivergence

#: below this |shape| the exponential (shape = 0) formulas are used
SHAPE_ZERO_TOL = 1e-9
# gradient w.r.t. shape switches to a series expansion below this |shape|
_SHAPE_SERIES_TOL = 1e-6
# relative offset from the upper support end where pot_loss goes linear
_SUPPORT_MARGIN = 1e-3


@dataclass(frozen=True)
class GevParams:
    location: float
    scale: float
    shape: float

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError(f"GEV scale must be > 0, got {self.scale}")


@dataclass(frozen=True, eq=False)
class Exceedances:
    values: np.ndarray
    threshold: float
    positions: np.ndarray | None = None

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class GpdFit:
    threshold: float
    scale: float
    shape: float
    n_exceed: int
    loglik: float
    iterations: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError(f"GP scale must be > 0, got {self.scale}")

    @property
    def upper_endpoint(self) -> float:
        """Upper end of the exceedance support (inf unless shape < 0)."""
        return -self.scale / self.shape if self.shape < -SHAPE_ZERO_TOL else math.inf

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GpdFit":
        return cls(**{k: d[k] for k in ("threshold", "scale", "shape", "n_exceed", "loglik") if k in d},
                   iterations=int(d.get("iterations", 0)))


@dataclass(frozen=True, eq=False)
class MeanExcessCurve:
    grid: np.ndarray
    me: np.ndarray
    ci_half_width: np.ndarray
    counts: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.counts >= 2


@dataclass(frozen=True)
class MepSuggestion:
    threshold: float | None
    slope: float = math.nan
    intercept: float = math.nan
    r2: float = math.nan
    n_points: int = 0

    @property
    def found(self) -> bool:
        return self.threshold is not None


def _as_series(series) -> np.ndarray:
    x = np.asarray(series, dtype=float).ravel()
    if x.size == 0:
        raise InputError("series is empty")
    return x


def block_maxima(series: Sequence[float], block_len: int) -> np.ndarray:
    """Maximum of each full, non-overlapping block; a trailing partial block is dropped."""
    x = _as_series(series)
    if block_len < 1:
        raise InputError(f"block_len must be >= 1, got {block_len}")
    n_blocks = x.size // block_len
    if n_blocks == 0:
        warnings.warn(f"block_len {block_len} exceeds series length {x.size}; no blocks", RuntimeWarning)
        return np.empty(0)
    return x[: n_blocks * block_len].reshape(n_blocks, block_len).max(axis=1)


def extract_exceedances(series: Sequence[float], threshold: float) -> Exceedances:
    x = _as_series(series)
    pos = np.flatnonzero(x > threshold)
    return Exceedances(values=x[pos] - threshold, threshold=float(threshold), positions=pos)


def gpd_cdf(z, scale: float, shape: float):
    """GP distribution function of an exceedance ``z``."""
    if not scale > 0:
        raise InputError(f"scale must be > 0, got {scale}")
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < 0):
        raise InputError("GP exceedances must be >= 0")
    if abs(shape) < SHAPE_ZERO_TOL:
        out = -np.expm1(-z_arr / scale)
    else:
        arg = 1.0 + shape * z_arr / scale
        if shape < 0 and np.any(arg < 0):
            raise InputError(f"z outside GP support (upper end {-scale / shape})")
        out = 1.0 - np.power(np.maximum(arg, 0.0), -1.0 / shape)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def gpd_ppf(u, scale: float, shape: float):
    """Inverse of :func:`gpd_cdf`."""
    u = np.asarray(u, dtype=float)
    if abs(shape) < SHAPE_ZERO_TOL:
        return -scale * np.log1p(-u)
    return scale / shape * (np.power(1.0 - u, -shape) - 1.0)


def gpd_sample(n: int, scale: float, shape: float, rng: np.random.Generator) -> np.ndarray:
    return gpd_ppf(rng.random(n), scale, shape)


def _values(exc) -> np.ndarray:
    return np.asarray(exc.values if isinstance(exc, Exceedances) else exc, dtype=float)


def gpd_loglik(scale: float, shape: float, exc) -> float:
    """Log-likelihood of GP(scale, shape) for the exceedances; -inf off-domain."""
    x = _values(exc)
    if x.size == 0:
        raise InputError("no exceedances")
    if not scale > 0:
        return -math.inf
    k = x.size
    if abs(shape) < SHAPE_ZERO_TOL:
        return float(-k * math.log(scale) - x.sum() / scale)
    arg = shape * x / scale
    if np.any(arg <= -1.0):
        return -math.inf
    return float(-k * math.log(scale) - (1.0 + 1.0 / shape) * np.log1p(arg).sum())


def _nll_and_grad(params: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood in (log scale, shape) and its gradient."""
    log_s, xi = params
    if xi <= -1.0:
        # likelihood is unbounded for shape <= -1; keep the search out of there
        return math.inf, np.full(2, np.nan)
    scale = math.exp(log_s)
    y = x / scale
    k = x.size
    ll = gpd_loglik(scale, xi, x)
    if not math.isfinite(ll):
        return math.inf, np.full(2, np.nan)
    u = 1.0 + xi * y
    d_logs = -k + (1.0 + xi) * np.sum(y / u)
    if abs(xi) < _SHAPE_SERIES_TOL:
        d_xi = np.sum(0.5 * y**2 - y + xi * (y**2 - 2.0 * y**3 / 3.0))
    else:
        d_xi = np.sum(np.log1p(xi * y)) / xi**2 - (1.0 + 1.0 / xi) * np.sum(y / u)
    return -ll / k, -np.array([d_logs, d_xi]) / k


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool


def bfgs_minimize(
    fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: Sequence[float],
    gtol: float = 1e-6,
    max_iter: int = 500,
) -> BfgsResult:
    """Quasi-Newton minimisation with an inverse-Hessian BFGS update and a
    backtracking Armijo line search. Infinite objective values are treated as
    infeasible and trigger step halving."""
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    if not math.isfinite(f):
        raise OptimizerDivergence("objective is not finite at the initial point", last_iterate=x)
    n = x.size
    eye = np.eye(n)
    h_inv = eye.copy()
    first = True
    for it in range(max_iter):
        if np.linalg.norm(g) <= gtol:
            return BfgsResult(x, f, g, it, True)
        p = -h_inv @ g
        slope = float(g @ p)
        if slope >= 0:
            h_inv = eye.copy()
            p, slope = -g, -float(g @ g)
        t = 1.0
        while True:
            x_new = x + t * p
            f_new, g_new = fun_grad(x_new)
            if math.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                # no further decrease representable; accept if we are at a stationary point
                if np.linalg.norm(g) <= math.sqrt(gtol):
                    return BfgsResult(x, f, g, it, True)
                raise OptimizerDivergence(
                    f"line search failed at iteration {it} (|grad| = {np.linalg.norm(g):.3e})", last_iterate=x
                )
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                h_inv = eye * (sy / float(yv @ yv))
                first = False
            rho = 1.0 / sy
            v = eye - rho * np.outer(s, yv)
            h_inv = v @ h_inv @ v.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
    if np.linalg.norm(g) <= gtol:
        return BfgsResult(x, f, g, max_iter, True)
    raise OptimizerDivergence(f"BFGS did not converge in {max_iter} iterations", last_iterate=x)


def moment_initializer(x: np.ndarray) -> tuple[float, float]:
    """Starting (scale, shape): method-of-moments scale with shape fixed at 0.1."""
    mean = float(np.mean(x))
    var = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
    scale = 0.5 * mean * (mean**2 / var + 1.0) if var > 0 else mean
    if not scale > 0:
        scale = max(float(np.max(x)), 1e-8)
    return scale, 0.1


def fit_gpd(
    exc: Exceedances,
    min_exceedances: int = 20,
    gtol: float = 1e-6,
    max_iter: int = 500,
) -> GpdFit:
    """Maximum-likelihood GP fit by BFGS over (log scale, shape).

    ``gtol`` applies to the gradient of the *mean* negative log-likelihood.
    """
    x = _values(exc)
    threshold = exc.threshold if isinstance(exc, Exceedances) else 0.0
    if x.size < min_exceedances:
        raise FitError(f"only {x.size} exceedances; at least {min_exceedances} required", count=int(x.size))
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise InputError("exceedances must be finite and >= 0")
    scale0, shape0 = moment_initializer(x)
    res = bfgs_minimize(lambda p: _nll_and_grad(p, x), [math.log(scale0), shape0], gtol=gtol, max_iter=max_iter)
    scale, shape = math.exp(res.x[0]), float(res.x[1])
    return GpdFit(
        threshold=float(threshold),
        scale=scale,
        shape=shape,
        n_exceed=int(x.size),
        loglik=gpd_loglik(scale, shape, x),
        iterations=res.iterations,
    )


def mean_excess_curve(series: Sequence[float], grid: Sequence[float]) -> MeanExcessCurve:
    """Empirical mean excess over each candidate threshold with a normal-theory 95% band.

    Points with fewer than two exceedances are NaN.
    """
    x = np.sort(_as_series(series))
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise InputError("grid must be non-empty and strictly ascending")
    me = np.full(grid.size, np.nan)
    half = np.full(grid.size, np.nan)
    counts = np.zeros(grid.size, dtype=int)
    for i, tau in enumerate(grid):
        above = x[np.searchsorted(x, tau, side="right"):]
        counts[i] = above.size
        if above.size >= 2:
            excess = above - tau
            me[i] = excess.mean()
            half[i] = 1.96 * excess.std(ddof=1) / math.sqrt(above.size)
    return MeanExcessCurve(grid=grid, me=me, ci_half_width=half, counts=counts)


def fit_mean_excess_line(curve: MeanExcessCurve, weighted: bool = True) -> tuple[float, float]:
    """Slope and intercept of a straight line through the defined curve points.

    With ``weighted`` each point is weighted by ``sqrt(count) / me``, its
    approximate inverse standard error (the spread of GP excesses grows with
    their mean), which damps the noisy high-threshold end of the curve.
    """
    ok = curve.defined & (curve.me > 0)
    if ok.sum() < 2:
        raise InputError("need at least 2 defined mean excess points")
    w = np.sqrt(curve.counts[ok]) / curve.me[ok] if weighted else None
    slope, intercept = np.polyfit(curve.grid[ok], curve.me[ok], 1, w=w)
    return float(slope), float(intercept)


def quantile_grid(series: Sequence[float], n_points: int = 50, upper_quantile: float = 0.8) -> np.ndarray:
    """Thresholds at evenly spaced sample quantiles from the minimum up to ``upper_quantile``."""
    x = _as_series(series)
    return np.unique(np.quantile(x, np.linspace(0.0, upper_quantile, n_points)))


def default_grid(series: Sequence[float], n_points: int = 50, upper_quantile: float = 0.98) -> np.ndarray:
    x = _as_series(series)
    lo, hi = np.min(x), np.quantile(x, upper_quantile)
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n_points, endpoint=False)


def _r2(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return r2, float(slope), float(intercept)


def suggest_mep_threshold(curve: MeanExcessCurve, r2_min: float = 0.98, min_tail_points: int = 5) -> MepSuggestion:
    """Smallest grid threshold from which the remaining mean-excess points are
    fitted by a straight line with R^2 >= ``r2_min``."""
    ok = curve.defined
    t, y = curve.grid[ok], curve.me[ok]
    if t.size < 10:
        raise InputError(f"mean excess curve has {t.size} defined points; need at least 10")
    for i in range(t.size - min_tail_points + 1):
        r2, slope, intercept = _r2(t[i:], y[i:])
        if r2 >= r2_min:
            return MepSuggestion(float(t[i]), slope, intercept, r2, int(t.size - i))
    return MepSuggestion(None)


def durbin_watson(exc) -> float:
    """Lag-1 Durbin-Watson statistic of the mean-centred exceedances; NaN if undefined."""
    e = _values(exc)
    if e.size < 3:
        return math.nan
    e = e - e.mean()
    denom = float(np.sum(e**2))
    if denom <= 1e-300:
        return math.nan
    return float(np.sum(np.diff(e) ** 2) / denom)


def _potl_terms(arg: float, scale: float, shape: float) -> tuple[float, float]:
    """GP negative log-density at ``arg`` and its derivative, inside the support."""
    if abs(shape) < SHAPE_ZERO_TOL:
        return math.log(scale) + arg / scale, 1.0 / scale
    z = shape * arg / scale
    return math.log(scale) + (1.0 + 1.0 / shape) * math.log1p(z), (1.0 + shape) / (scale * (1.0 + z))


def potl_boundary(scale: float, shape: float) -> float:
    """Argument at which pot_loss switches to its linear continuation (inf if none)."""
    if shape < -SHAPE_ZERO_TOL:
        return -scale / shape * (1.0 - _SUPPORT_MARGIN)
    return math.inf


def _potl_argument(pred: float, fit: GpdFit, raw_argument: bool) -> float:
    if not pred > fit.threshold:
        raise InputError(f"pot_loss requires pred > threshold ({pred} <= {fit.threshold})")
    return float(pred) if raw_argument else float(pred) - fit.threshold


def pot_loss(pred: float, fit: GpdFit, raw_argument: bool = False) -> float:
    """GP negative log-likelihood of an above-threshold prediction.

    Evaluated at the exceedance ``pred - threshold`` (or at ``pred`` itself with
    ``raw_argument``). Beyond the upper support end of a short-tailed fit the
    loss continues linearly from a point just inside the support, with slope
    equal to the magnitude of the derivative there.
    """
    e = _potl_argument(pred, fit, raw_argument)
    bound = potl_boundary(fit.scale, fit.shape)
    if e >= bound:
        fb, db = _potl_terms(bound, fit.scale, fit.shape)
        return fb + abs(db) * (e - bound)
    if fit.shape > SHAPE_ZERO_TOL and 1.0 + fit.shape * e / fit.scale <= 0:
        raise InputError("raw pot_loss argument below the GP support")
    return _potl_terms(e, fit.scale, fit.shape)[0]


def pot_loss_derivative(pred: float, fit: GpdFit, raw_argument: bool = False) -> float:
    e = _potl_argument(pred, fit, raw_argument)
    bound = potl_boundary(fit.scale, fit.shape)
    if e >= bound:
        return abs(_potl_terms(bound, fit.scale, fit.shape)[1])
    return _potl_terms(e, fit.scale, fit.shape)[1]
