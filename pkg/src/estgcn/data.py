"""Daily station panels: CSV ingestion and cleaning, and a synthetic generator
with a known generalized Pareto tail."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .evt import gpd_sample
from .geo_graph import StationMeta, distance_matrix

logger = logging.getLogger(__name__)

PANEL_HEADER = ["date", "station_id", "value"]


@dataclass(eq=False)
class SeriesPanel:
    timestamps: np.ndarray
    station_ids: list[str]
    values: np.ndarray
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[D]")
        self.values = np.asarray(self.values, dtype=float)
        self.station_ids = list(self.station_ids)
        t = len(self.timestamps)
        if self.values.shape != (t, len(self.station_ids)):
            raise InputError(f"values shape {self.values.shape} != ({t}, {len(self.station_ids)})")
        if t > 1 and np.any(np.diff(self.timestamps).astype(int) <= 0):
            raise InputError("timestamps must be strictly increasing")
        if len(set(self.station_ids)) != len(self.station_ids):
            raise InputError("duplicate station ids in panel")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def n_stations(self) -> int:
        return self.values.shape[1]

    def column(self, station: str) -> np.ndarray:
        return self.values[:, self.station_ids.index(station)]

    def rows(self, start: int, stop: int) -> "SeriesPanel":
        return SeriesPanel(self.timestamps[start:stop], self.station_ids, self.values[start:stop], self.dropped)

    def equals(self, other: "SeriesPanel") -> bool:
        return (
            self.station_ids == other.station_ids
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


# ---------------------------------------------------------------------------
# CSV


def _fill_gaps(col: np.ndarray, max_gap: int) -> np.ndarray:
    """Forward-fill runs of at most ``max_gap`` missing days, then interpolate
    what is left linearly (edges take the nearest observation)."""
    out = col.copy()
    t = len(out)
    i = 0
    while i < t:
        if np.isnan(out[i]):
            j = i
            while j < t and np.isnan(out[j]):
                j += 1
            if i > 0 and j - i <= max_gap:
                out[i:j] = out[i - 1]
            i = j
        else:
            i += 1
    miss = np.isnan(out)
    if miss.any() and not miss.all():
        idx = np.arange(t)
        out[miss] = np.interp(idx[miss], idx[~miss], out[~miss])
    return out


def clean_panel(panel: SeriesPanel, max_gap: int = 3, missing_frac: float = 0.2) -> SeriesPanel:
    """Drop stations whose raw missing fraction exceeds ``missing_frac`` and fill the rest."""
    frac = np.isnan(panel.values).mean(axis=0) if panel.n_days else np.zeros(panel.n_stations)
    keep = [i for i in range(panel.n_stations) if frac[i] <= missing_frac]
    dropped = tuple(panel.station_ids[i] for i in range(panel.n_stations) if i not in keep)
    if dropped:
        logger.warning("dropping stations with more than %.0f%% missing days: %s", 100 * missing_frac, list(dropped))
    cols = [_fill_gaps(panel.values[:, i], max_gap) for i in keep]
    values = np.column_stack(cols) if cols else np.empty((panel.n_days, 0))
    return SeriesPanel(panel.timestamps, [panel.station_ids[i] for i in keep], values, panel.dropped + dropped)


def load_panel_csv(
    path: str | Path,
    roster: Sequence[StationMeta] | Sequence[str] | None = None,
    max_gap: int = 3,
    missing_frac: float = 0.2,
) -> SeriesPanel:
    """Read a long ``date,station_id,value`` file into a cleaned T x N panel.

    Columns follow the roster order when one is given (rows for unknown
    stations are ignored); otherwise first-appearance order. Every calendar
    day between the first and last date gets a row. Empty values count as
    missing.
    """
    records: dict[tuple[np.datetime64, str], float] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PANEL_HEADER:
            raise InputError(f"{path}: expected header {','.join(PANEL_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                day = np.datetime64(row[0].strip(), "D")
                sid = row[1].strip()
                text = row[2].strip()
                value = float(text) if text else math.nan
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: cannot parse row {row}") from exc
            if not sid:
                raise InputError(f"{path}:{lineno}: empty station id")
            key = (day, sid)
            if key in records:
                raise InputError(f"{path}:{lineno}: duplicate entry for station {sid} on {day}")
            records[key] = value
            if sid not in order:
                order.append(sid)
    if not records:
        raise InputError(f"{path}: no data rows")

    if roster is not None:
        ids = [r.id if isinstance(r, StationMeta) else str(r) for r in roster]
        unknown = sorted(set(order) - set(ids))
        if unknown:
            logger.warning("ignoring stations missing from the roster: %s", unknown)
    else:
        ids = order
    days = [d for d, _ in records]
    first, last = min(days), max(days)
    stamps = np.arange(first, last + np.timedelta64(1, "D"), dtype="datetime64[D]")
    col = {s: i for i, s in enumerate(ids)}
    values = np.full((len(stamps), len(ids)), np.nan)
    for (day, sid), v in records.items():
        if sid in col:
            values[(day - first).astype(int), col[sid]] = v
    return clean_panel(SeriesPanel(stamps, ids, values), max_gap, missing_frac)


def write_panel_csv(path: str | Path, panel: SeriesPanel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PANEL_HEADER)
        for t, day in enumerate(panel.timestamps):
            for j, sid in enumerate(panel.station_ids):
                v = panel.values[t, j]
                w.writerow([str(day), sid, "" if np.isnan(v) else repr(float(v))])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings. Distances in km, levels in data units.

    The base process is a seasonal AR(1) whose innovations are spatially
    correlated with ``exp(-d / corr_length)``; it is capped at ``threshold``.
    A persistent two-state regime (a common Markov chain, joined by each
    station with probability ``coupling``) replaces the base level by
    ``threshold + GP(gp_scale, gp_shape)`` draws, so every value above the
    threshold is a GP exceedance.
    """

    n_stations: int = 10
    n_days: int = 800
    threshold: float = 60.0
    base_level: float = 45.0
    seasonal_amplitude: float = 10.0
    ar_coef: float = 0.7
    noise_sd: float = 6.0
    corr_length: float = 20.0
    shock_rate: float = 0.3
    shock_persistence: float = 0.8
    coupling: float = 0.9
    gp_scale: float = 15.0
    gp_shape: float = 0.2
    center: tuple[float, float] = (28.65, 77.15)
    extent_deg: float = 0.25
    start_date: str = "2020-01-01"

    def __post_init__(self):
        if self.n_stations < 1 or self.n_days < 1:
            raise InputError("n_stations and n_days must be >= 1")
        if not (0.0 <= self.shock_rate < 1.0):
            raise InputError("shock_rate must lie in [0, 1)")
        if not (0.0 <= self.shock_persistence < 1.0):
            raise InputError("shock_persistence must lie in [0, 1)")
        if not (0.0 < self.coupling <= 1.0):
            raise InputError("coupling must lie in (0, 1]")
        if not self.gp_scale > 0:
            raise InputError("gp_scale must be > 0")
        if not abs(self.ar_coef) < 1:
            raise InputError("ar_coef must lie in (-1, 1)")


@dataclass(eq=False)
class SyntheticTruth:
    spec: SyntheticSpec
    stations: list[StationMeta]
    shock_mask: np.ndarray
    gp_scale: float
    gp_shape: float
    threshold: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "threshold": self.threshold,
            "gp_scale": self.gp_scale,
            "gp_shape": self.gp_shape,
            "shock_days": int(self.shock_mask.sum()),
            "stations": [{"station_id": s.id, "lat": s.lat, "lon": s.lon} for s in self.stations],
        }


def _regime(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Common shock chain with the requested marginal rate per station."""
    t = spec.n_days
    rate = min(spec.shock_rate / spec.coupling, 0.999)
    stay = spec.shock_persistence
    # stationary probability rate = enter / (1 - stay + enter)
    enter = min(1.0, rate * (1.0 - stay) / (1.0 - rate)) if rate > 0 else 0.0
    common = np.zeros(t, dtype=bool)
    u = rng.random(t)
    state = u[0] < rate
    for i in range(t):
        if i > 0:
            state = u[i] < (stay if state else enter)
        common[i] = state
    join = rng.random((t, spec.n_stations)) < spec.coupling
    return common[:, None] & join


def generate_synthetic_panel(spec: SyntheticSpec | None = None, seed: int = 0) -> tuple[SeriesPanel, SyntheticTruth]:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    n, t = spec.n_stations, spec.n_days
    half = spec.extent_deg
    lat = rng.uniform(spec.center[0] - half, spec.center[0] + half, n)
    lon = rng.uniform(spec.center[1] - half, spec.center[1] + half, n)
    stations = [StationMeta(f"S{i + 1:02d}", float(a), float(b)) for i, (a, b) in enumerate(zip(lat, lon))]

    corr = np.exp(-distance_matrix(stations) / spec.corr_length)
    chol = np.linalg.cholesky(corr + 1e-10 * np.eye(n))
    eps = rng.standard_normal((t, n)) @ chol.T * spec.noise_sd
    noise = np.empty((t, n))
    noise[0] = eps[0] / math.sqrt(1.0 - spec.ar_coef**2)
    for i in range(1, t):
        noise[i] = spec.ar_coef * noise[i - 1] + eps[i]
    season = spec.seasonal_amplitude * np.cos(2.0 * math.pi * np.arange(t) / 365.25)
    base = np.minimum(spec.base_level + season[:, None] + noise, spec.threshold)

    shocks = _regime(rng, spec) if spec.shock_rate > 0 else np.zeros((t, n), dtype=bool)
    draws = gpd_sample(int(shocks.sum()), spec.gp_scale, spec.gp_shape, rng)
    values = base.copy()
    values[shocks] = spec.threshold + draws
    # a zero GP draw would sit exactly on the threshold; nudge it above
    values[shocks] = np.maximum(values[shocks], np.nextafter(spec.threshold, math.inf))

    start = np.datetime64(spec.start_date, "D")
    stamps = start + np.arange(t).astype("timedelta64[D]")
    panel = SeriesPanel(stamps, [s.id for s in stations], values)
    truth = SyntheticTruth(spec, stations, shocks, spec.gp_scale, spec.gp_shape, spec.threshold, seed)
    return panel, truth
