"""Spatiotemporal network: graph message passing per timestamp, then an LSTM
over lagged embeddings per station and a direct multi-output dense head.

All forward computations run on an :class:`~estgcn.autodiff.Tape` so the same
code serves inference and training. Weights are shared across stations and
timestamps.

Shapes used below: ``S`` samples (forecast origins), ``W`` input window
length, ``N`` stations, ``p`` lag, ``m`` LSTM width, ``q`` horizon.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import InputError
from .geo_graph import LaplacianBundle

GATES = ("f", "i", "m", "o")
ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid}


@dataclass(frozen=True)
class ModelConfig:
    n_stations: int
    horizon: int
    k_layers: int = 2
    spatial_hidden: int = 8
    lag: int = 7
    hidden: int = 32
    seq_len: int = 7
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("n_stations", "horizon", "k_layers", "spatial_hidden", "lag", "hidden", "seq_len"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def window(self) -> int:
        """Input rows consumed per forecast: ``seq_len`` lag vectors of length ``lag``."""
        return self.seq_len + self.lag - 1


@dataclass
class SpatialBlock:
    k_layers: int
    neighbor_weights: list[np.ndarray]
    self_weights: list[np.ndarray]
    activation: str
    cheb_w0: np.ndarray
    cheb_w1: np.ndarray
    dense_w: np.ndarray
    dense_b: np.ndarray

    def __post_init__(self):
        if not (len(self.neighbor_weights) == len(self.self_weights) == self.k_layers):
            raise InputError("layer count does not match weight lists")

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"spatial.cheb_w0": self.cheb_w0, "spatial.cheb_w1": self.cheb_w1}
        for k, (w, b) in enumerate(zip(self.neighbor_weights, self.self_weights), start=1):
            out[f"spatial.W{k}"] = w
            out[f"spatial.B{k}"] = b
        out["spatial.dense_w"] = self.dense_w
        out["spatial.dense_b"] = self.dense_b
        return out


@dataclass
class TemporalBlock:
    """LSTM gate parameters in the (m x p, m x m, m) layout plus the q x m head."""

    lag: int
    hidden: int
    horizon: int
    u_zf: np.ndarray
    u_hf: np.ndarray
    b_f: np.ndarray
    u_zi: np.ndarray
    u_hi: np.ndarray
    b_i: np.ndarray
    u_zm: np.ndarray
    u_hm: np.ndarray
    b_m: np.ndarray
    u_zo: np.ndarray
    u_ho: np.ndarray
    b_o: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        m, p, q = self.hidden, self.lag, self.horizon
        for g in GATES:
            if getattr(self, f"u_z{g}").shape != (m, p):
                raise InputError(f"u_z{g} must have shape {(m, p)}")
            if getattr(self, f"u_h{g}").shape != (m, m):
                raise InputError(f"u_h{g} must have shape {(m, m)}")
            if getattr(self, f"b_{g}").shape != (m,):
                raise InputError(f"b_{g} must have shape {(m,)}")
        if self.head_w.shape != (q, m) or self.head_b.shape != (q,):
            raise InputError("dense head shapes do not match (horizon, hidden)")

    def parameters(self) -> dict[str, np.ndarray]:
        names = [f"{kind}{g}" for g in GATES for kind in ("u_z", "u_h", "b_")] + ["head_w", "head_b"]
        return {f"temporal.{n}": getattr(self, n) for n in names}

    @classmethod
    def zeros(cls, lag: int, hidden: int, horizon: int) -> "TemporalBlock":
        kw = {}
        for g in GATES:
            kw[f"u_z{g}"] = np.zeros((hidden, lag))
            kw[f"u_h{g}"] = np.zeros((hidden, hidden))
            kw[f"b_{g}"] = np.zeros(hidden)
        return cls(lag, hidden, horizon, head_w=np.zeros((horizon, hidden)), head_b=np.zeros(horizon), **kw)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormStats":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        # a constant training series cannot be scaled; leave it unscaled
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)


@dataclass
class EstgcnModel:
    config: ModelConfig
    spatial: SpatialBlock
    temporal: TemporalBlock
    graph: LaplacianBundle
    norm_stats: NormStats
    station_ids: list[str] = field(default_factory=list)

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.spatial.parameters(), **self.temporal.parameters()}

    def copy(self) -> "EstgcnModel":
        return EstgcnModel(
            config=self.config,
            spatial=_copy_block(self.spatial),
            temporal=_copy_block(self.temporal),
            graph=self.graph,
            norm_stats=NormStats(self.norm_stats.mean.copy(), self.norm_stats.std.copy()),
            station_ids=list(self.station_ids),
        )

    def set_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        own = self.parameters()
        for name, value in params.items():
            own[name][...] = value


def _copy_block(block):
    kw = {}
    for k, v in vars(block).items():
        if isinstance(v, np.ndarray):
            kw[k] = v.copy()
        elif isinstance(v, list):
            kw[k] = [a.copy() for a in v]
        else:
            kw[k] = v
    return type(block)(**kw)


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(
    config: ModelConfig,
    graph: LaplacianBundle,
    norm_stats: NormStats | None = None,
    seed: int = 0,
    station_ids: list[str] | None = None,
) -> EstgcnModel:
    """Seeded Glorot-uniform weights, zero biases; the Chebyshev filter starts as identity."""
    if graph.n != config.n_stations:
        raise InputError(f"graph has {graph.n} nodes but config expects {config.n_stations}")
    rng = np.random.default_rng(seed)
    d = config.spatial_hidden
    dims = [1] + [d] * config.k_layers
    neigh = [_glorot(rng, (dims[k], dims[k + 1])) for k in range(config.k_layers)]
    selfw = [_glorot(rng, (dims[k], dims[k + 1])) for k in range(config.k_layers)]
    spatial = SpatialBlock(
        k_layers=config.k_layers,
        neighbor_weights=neigh,
        self_weights=selfw,
        activation=config.activation,
        cheb_w0=np.array(1.0),
        cheb_w1=np.array(0.0),
        dense_w=_glorot(rng, (d, 1)),
        dense_b=np.zeros(1),
    )
    m, p, q = config.hidden, config.lag, config.horizon
    kw = {}
    for g in GATES:
        kw[f"u_z{g}"] = _glorot(rng, (m, p))
        kw[f"u_h{g}"] = _glorot(rng, (m, m))
        kw[f"b_{g}"] = np.zeros(m)
    temporal = TemporalBlock(p, m, q, head_w=_glorot(rng, (q, m)), head_b=np.zeros(q), **kw)
    n = config.n_stations
    stats = norm_stats or NormStats(np.zeros(n), np.ones(n))
    return EstgcnModel(config, spatial, temporal, graph, stats, list(station_ids or [str(i) for i in range(n)]))


# ---------------------------------------------------------------------------
# tape-level building blocks


def chebyshev_tape(x: ad.Variable, normalized: np.ndarray, w0: ad.Variable, w1: ad.Variable) -> ad.Variable:
    """``w0 x + w1 L~ x`` for x of shape (..., N); L~ is symmetric so ``x @ L~`` suffices."""
    return ad.add(ad.scale(x, w0), ad.scale(ad.matmul(x, normalized), w1))


def spatial_tape(
    x: ad.Variable, bundle: LaplacianBundle, P: Mapping[str, ad.Variable], k_layers: int, activation: str
) -> ad.Variable:
    """Message passing on signals ``x`` of shape (R, N); returns embeddings (R, N)."""
    f = ACTIVATIONS[activation]
    r, n = x.shape
    h = chebyshev_tape(x, bundle.normalized, P["spatial.cheb_w0"], P["spatial.cheb_w1"])
    h = ad.reshape(h, (r, n, 1))
    for k in range(1, k_layers + 1):
        agg = ad.matmul(x.tape.constant(bundle.aggregator), h)
        h = f(ad.add(ad.matmul(agg, P[f"spatial.W{k}"]), ad.matmul(h, P[f"spatial.B{k}"])))
    z = ad.add(ad.matmul(h, P["spatial.dense_w"]), P["spatial.dense_b"])
    return ad.reshape(z, (r, n))


def lstm_step_tape(z, h_prev, c_prev, T: Mapping[str, ad.Variable]):
    """One LSTM update for row-batched inputs ``z`` (R, p) and states (R, m).

    ``T`` holds the transposed gate matrices under ``u_z*``/``u_h*`` keys.
    """

    def gate(g):
        return ad.add(ad.add(ad.matmul(z, T[f"u_z{g}"]), ad.matmul(h_prev, T[f"u_h{g}"])), T[f"b_{g}"])

    forget = ad.sigmoid(gate("f"))
    inp = ad.sigmoid(gate("i"))
    memory = ad.tanh(gate("m"))
    out = ad.sigmoid(gate("o"))
    c = ad.add(ad.mul(forget, c_prev), ad.mul(inp, memory))
    h = ad.mul(out, ad.tanh(c))
    return h, c


def _transposed_gates(P: Mapping[str, ad.Variable]) -> dict[str, ad.Variable]:
    T = {}
    for g in GATES:
        T[f"u_z{g}"] = ad.transpose(P[f"temporal.u_z{g}"])
        T[f"u_h{g}"] = ad.transpose(P[f"temporal.u_h{g}"])
        T[f"b_{g}"] = P[f"temporal.b_{g}"]
    return T


def temporal_tape(z_seq: ad.Variable, P: Mapping[str, ad.Variable], lag: int, hidden: int) -> ad.Variable:
    """Unroll the LSTM over every lag window of ``z_seq`` (R, W) and apply the head; returns (R, q)."""
    tape = z_seq.tape
    r, w = z_seq.shape
    steps = w - lag + 1
    if steps < 1:
        raise InputError(f"need at least {lag} embeddings, got {w}")
    T = _transposed_gates(P)
    h = tape.constant(np.zeros((r, hidden)))
    c = tape.constant(np.zeros((r, hidden)))
    for s in range(steps):
        h, c = lstm_step_tape(ad.slice_(z_seq, (slice(None), slice(s, s + lag))), h, c, T)
    return ad.add(ad.matmul(h, ad.transpose(P["temporal.head_w"])), P["temporal.head_b"])


def forward_tape(model: EstgcnModel, P: Mapping[str, ad.Variable], x_norm: np.ndarray) -> ad.Variable:
    """Normalised windows (S, W, N) -> normalised forecasts (S, q, N)."""
    tape = next(iter(P.values())).tape
    s, w, n = x_norm.shape
    cfg = model.config
    if n != model.graph.n:
        raise InputError(f"input has {n} stations, graph has {model.graph.n}")
    x = tape.constant(x_norm.reshape(s * w, n))
    z = spatial_tape(x, model.graph, P, cfg.k_layers, cfg.activation)
    z = ad.transpose(ad.reshape(z, (s, w, n)), (0, 2, 1))
    out = temporal_tape(ad.reshape(z, (s * n, w)), P, cfg.lag, cfg.hidden)
    return ad.transpose(ad.reshape(out, (s, n, cfg.horizon)), (0, 2, 1))


def denormalize_tape(y: ad.Variable, stats: NormStats) -> ad.Variable:
    std = np.broadcast_to(stats.std, y.shape).copy()
    return ad.add(ad.mul(y, std), stats.mean)


def parameter_variables(tape: ad.Tape, model: EstgcnModel, requires_grad: bool = True) -> dict[str, ad.Variable]:
    return {k: tape.variable(v, requires_grad=requires_grad, name=k) for k, v in model.parameters().items()}


# ---------------------------------------------------------------------------
# numpy-facing operations


def chebyshev_first_order(x_t, bundle: LaplacianBundle, w0: float, w1: float) -> np.ndarray:
    x = np.asarray(x_t, dtype=float)
    if x.shape[-1] != bundle.n:
        raise InputError(f"signal length {x.shape[-1]} does not match graph size {bundle.n}")
    return w0 * x + w1 * (bundle.normalized @ x)


def spatial_forward(x_t, graph: LaplacianBundle, block: SpatialBlock) -> np.ndarray:
    """Embeddings for one timestamp's N-vector."""
    x = np.asarray(x_t, dtype=float)
    if x.shape != (graph.n,):
        raise InputError(f"x_t must have shape ({graph.n},), got {x.shape}")
    tape = ad.Tape()
    P = {k: tape.constant(v) for k, v in block.parameters().items()}
    return spatial_tape(tape.constant(x[None, :]), graph, P, block.k_layers, block.activation).value[0]


def lstm_step(z_lags, h_prev, c_prev, params: TemporalBlock) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z_lags, dtype=float)
    h0 = np.asarray(h_prev, dtype=float)
    c0 = np.asarray(c_prev, dtype=float)
    if z.shape != (params.lag,) or h0.shape != (params.hidden,) or c0.shape != (params.hidden,):
        raise InputError("lstm_step: input/state shapes do not match the block")
    tape = ad.Tape()
    P = {k: tape.constant(v) for k, v in params.parameters().items()}
    h, c = lstm_step_tape(tape.constant(z[None]), tape.constant(h0[None]), tape.constant(c0[None]), _transposed_gates(P))
    return h.value[0], c.value[0]


def _history_array(history, station_ids=None):
    from .data import SeriesPanel

    if isinstance(history, SeriesPanel):
        return history.values, history.station_ids, history.timestamps
    arr = np.asarray(history, dtype=float)
    return arr, station_ids, None


def predict_windows(model: EstgcnModel, windows: np.ndarray) -> np.ndarray:
    """Raw-unit windows (S, W, N) -> raw-unit forecasts (S, q, N)."""
    x = (np.asarray(windows, dtype=float) - model.norm_stats.mean) / model.norm_stats.std
    tape = ad.Tape()
    P = parameter_variables(tape, model, requires_grad=False)
    y = forward_tape(model, P, x).value
    return y * model.norm_stats.std + model.norm_stats.mean


def forecast(model: EstgcnModel, history) -> np.ndarray:
    """q x N forecast from the most recent rows of ``history`` (a SeriesPanel or T x N array)."""
    values, ids, stamps = _history_array(history, model.station_ids)
    if values.ndim != 2 or values.shape[1] != model.graph.n:
        raise InputError(f"history must be T x {model.graph.n}")
    p = model.config.lag
    if values.shape[0] < p:
        raise InputError(f"history has {values.shape[0]} rows; at least {p} required")
    tail = values[-model.config.window:]
    bad = np.argwhere(~np.isfinite(tail))
    if bad.size:
        r, c = bad[0]
        row = values.shape[0] - tail.shape[0] + r
        when = str(stamps[row]) if stamps is not None else f"row {row}"
        who = ids[c] if ids else f"column {c}"
        raise InputError(f"non-finite history value at station {who}, {when}")
    return predict_windows(model, tail[None])[0]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "estgcn-checkpoint"


def save_checkpoint(model: EstgcnModel, path: str | Path) -> None:
    g = model.graph
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(model.config),
        "station_ids": model.station_ids,
        "norm_stats": {"mean": model.norm_stats.mean.tolist(), "std": model.norm_stats.std.tolist()},
        "graph": {
            "laplacian": g.laplacian.tolist(),
            "zeta_max": g.zeta_max,
            "normalized": g.normalized.tolist(),
            "aggregator": g.aggregator.tolist(),
        },
        "parameters": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.parameters().items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> EstgcnModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not an estgcn checkpoint")
    cfg = ModelConfig(**doc["config"])
    gd = doc["graph"]
    lap = np.array(gd["laplacian"], dtype=float)
    bundle = LaplacianBundle(
        laplacian=lap,
        degree=np.diag(np.diag(lap)),
        zeta_max=float(gd["zeta_max"]),
        normalized=np.array(gd["normalized"], dtype=float),
        aggregator=np.array(gd["aggregator"], dtype=float),
    )
    stats = NormStats(np.array(doc["norm_stats"]["mean"], dtype=float), np.array(doc["norm_stats"]["std"], dtype=float))
    model = init_model(cfg, bundle, stats, station_ids=doc["station_ids"])
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["parameters"].items()}
    if set(params) != set(model.parameters()):
        raise InputError("checkpoint parameter names do not match the model layout")
    model.set_parameters(params)
    return model
