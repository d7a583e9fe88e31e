"""Station graph construction.

Great-circle distances between monitoring stations are turned into a sparse
Gaussian-kernel adjacency matrix, from which the combinatorial Laplacian and
its rescaled form (spectrum mapped into [-1, 1]) are derived for the
first-order Chebyshev filter.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, NumericError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class StationMeta:
    id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise InputError(f"station {self.id!r}: latitude {self.lat} outside [-90, 90]")
        if not (-180.0 < self.lon <= 180.0):
            raise InputError(f"station {self.id!r}: longitude {self.lon} outside (-180, 180]")


@dataclass(frozen=True)
class AdjacencyConfig:
    """Kernel bandwidth (km^2), sparsity cutoff and sphere radius (km)."""

    sigma_sq: float = 100.0
    epsilon: float = 0.1
    earth_radius: float = EARTH_RADIUS_KM

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise InputError(f"sigma_sq must be > 0, got {self.sigma_sq}")
        if not (0.0 < self.epsilon <= 1.0):
            raise InputError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not self.earth_radius > 0:
            raise InputError(f"earth_radius must be > 0, got {self.earth_radius}")

    @property
    def cutoff_radius(self) -> float:
        """Distance beyond which two stations are never linked."""
        return math.sqrt(-self.sigma_sq * math.log(self.epsilon))


@dataclass(frozen=True, eq=False)
class StationGraph:
    stations: tuple[StationMeta, ...]
    adjacency: np.ndarray
    distances: np.ndarray
    warnings: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.stations)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.stations]

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i] > 0)

    def mean_aggregator(self) -> np.ndarray:
        """Row-normalised neighbour indicator; rows of isolated nodes are zero."""
        mask = (self.adjacency > 0).astype(float)
        deg = mask.sum(axis=1, keepdims=True)
        return np.divide(mask, deg, out=np.zeros_like(mask), where=deg > 0)

    def permuted(self, order: Sequence[int]) -> "StationGraph":
        order = np.asarray(order)
        return StationGraph(
            stations=tuple(self.stations[i] for i in order),
            adjacency=self.adjacency[np.ix_(order, order)],
            distances=self.distances[np.ix_(order, order)],
            warnings=self.warnings,
        )


@dataclass(frozen=True, eq=False)
class LaplacianBundle:
    laplacian: np.ndarray
    degree: np.ndarray
    zeta_max: float
    normalized: np.ndarray
    aggregator: np.ndarray
    iterations: int = 0

    @property
    def n(self) -> int:
        return self.laplacian.shape[0]


def haversine_distance(a: StationMeta, b: StationMeta, radius: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance in km between two stations.

    The cosine factors use latitudes, which is the standard haversine form.
    """
    if not radius > 0:
        raise InputError(f"radius must be > 0, got {radius}")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi1 - phi2
    dlam = math.radians(a.lon - b.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    h = min(1.0, max(0.0, h))
    # atan2 keeps full precision near the antipode where asin(sqrt(h)) does not
    return 2.0 * radius * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def distance_matrix(stations: Sequence[StationMeta], radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    n = len(stations)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = haversine_distance(stations[i], stations[j], radius)
    return d


def build_adjacency(stations: Iterable[StationMeta], config: AdjacencyConfig | None = None) -> StationGraph:
    """Gaussian-kernel adjacency ``exp(-d^2 / sigma_sq)`` with entries below
    ``epsilon`` (and the diagonal) set to zero."""
    config = config or AdjacencyConfig()
    stations = tuple(stations)
    if len(stations) < 2:
        raise InputError(f"need at least 2 stations, got {len(stations)}")
    ids = [s.id for s in stations]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise InputError(f"duplicate station ids: {dupes}")

    d = distance_matrix(stations, config.earth_radius)
    kernel = np.exp(-(d**2) / config.sigma_sq)
    adj = np.where(kernel >= config.epsilon, kernel, 0.0)
    np.fill_diagonal(adj, 0.0)

    notes = []
    if not np.any(adj):
        notes.append("no edges survive the epsilon cutoff; every station is isolated")
    isolated = [ids[i] for i in np.flatnonzero(adj.sum(axis=1) == 0)]
    if isolated and len(isolated) < len(ids):
        notes.append(f"isolated stations: {isolated}")
    for msg in notes:
        logger.warning(msg)
    return StationGraph(stations=stations, adjacency=adj, distances=d, warnings=tuple(notes))


def largest_eigenvalue(
    matrix: np.ndarray, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0, stride: int = 8
) -> tuple[float, int]:
    """Power iteration for the dominant eigenvalue of a symmetric PSD matrix.

    Each iteration applies ``matrix**stride`` (precomputed by squaring), so
    close leading eigenvalues still separate within the iteration cap.
    Convergence is declared when the residual ``|M v - lam v|`` of the Rayleigh
    quotient ``lam`` falls below ``tol * lam``; a change-in-``lam`` test would
    stop early when the two leading eigenvalues are close. Returns the
    Rayleigh quotient and the number of iterations used.
    """
    n = matrix.shape[0]
    if not np.any(matrix):
        return 0.0, 0
    scale = np.max(np.abs(matrix))
    power = matrix / scale
    for _ in range(int(math.log2(max(1, stride)))):
        power = power @ power
        power /= np.max(np.abs(power))
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = float(v @ matrix @ v)
    for it in range(1, max_iter + 1):
        w = power @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, it
        v = w / norm
        mv = matrix @ v
        lam = float(v @ mv)
        if np.linalg.norm(mv - lam * v) <= tol * abs(lam):
            return lam, it
    raise NumericError(f"power iteration did not converge in {max_iter} iterations (last estimate {lam})")


def laplacian_bundle(
    graph: StationGraph,
    tol: float = 1e-8,
    max_iter: int = 1000,
    fixed_zeta_max: float | None = None,
) -> LaplacianBundle:
    """L = D - A, its largest eigenvalue and ``2 L / zeta_max - I``.

    ``fixed_zeta_max=2.0`` reproduces the usual first-order GCN shortcut.
    """
    adj = graph.adjacency
    degree = np.diag(adj.sum(axis=1))
    lap = degree - adj
    iterations = 0
    if fixed_zeta_max is not None:
        if not fixed_zeta_max > 0:
            raise InputError("fixed_zeta_max must be > 0")
        zeta = float(fixed_zeta_max)
    else:
        zeta, iterations = largest_eigenvalue(lap, tol=tol, max_iter=max_iter)
    eye = np.eye(graph.n)
    # edgeless graph: L = 0, so the rescaled operator degenerates to -I
    normalized = 2.0 * lap / zeta - eye if zeta > 0 else -eye
    return LaplacianBundle(
        laplacian=lap,
        degree=degree,
        zeta_max=zeta,
        normalized=normalized,
        aggregator=graph.mean_aggregator(),
        iterations=iterations,
    )


def read_roster_csv(path: str | Path) -> list[StationMeta]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["station_id", "lat", "lon"]:
            raise InputError(f"{path}: expected header station_id,lat,lon, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(StationMeta(row["station_id"].strip(), float(row["lat"]), float(row["lon"])))
            except (TypeError, ValueError) as exc:
                if isinstance(exc, InputError):
                    raise
                raise InputError(f"{path}:{lineno}: cannot parse roster row {row}") from exc
    return out


def write_roster_csv(path: str | Path, stations: Iterable[StationMeta]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "lat", "lon"])
        for s in stations:
            w.writerow([s.id, repr(s.lat), repr(s.lon)])
