"""Run configuration: a JSON document deep-merged over built-in defaults.

Every tunable of the pipeline is a key here; unknown keys are rejected so a
typo cannot silently fall back to a default.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path
from typing import Any

from .data import SyntheticSpec
from .errors import ConfigError

NAAQS_THRESHOLDS = {"PM2.5": 60.0, "PM10": 100.0, "NO2": 80.0}

DEFAULTS: dict[str, Any] = {
    "pollutant": "PM2.5",
    "seed": 0,
    "threshold": None,
    "data": {
        "panel_csv": None,
        "roster_csv": None,
        "max_gap": 3,
        "missing_frac": 0.2,
        "synthetic": {f.name: f.default for f in fields(SyntheticSpec)},
    },
    "graph": {"sigma_sq": 100.0, "epsilon": 0.1, "fixed_zeta_max": None},
    "evt": {"min_exceedances": 20, "potl_raw_argument": False},
    "model": {"k_layers": 2, "spatial_hidden": 8, "lag": 7, "hidden": 16, "seq_len": 7, "activation": "tanh"},
    "training": {
        "learning_rate": 1e-3,
        "epochs": 20,
        "batch_size": 32,
        "clip_norm": 5.0,
        "adam_b1": 0.9,
        "adam_b2": 0.999,
        "adam_eps": 1e-8,
        "warm_start": False,
    },
    "betas": {
        "grid": [[b1, b2] for b1 in (0.5, 1.0) for b2 in (0.0, 0.1, 0.5, 1.0)],
        "selection": "per_scheme",
    },
    "windows": {"scheme": "short", "test_days": 365, "anchor": None, "val_days": None},
    "conformal": {"rho": 0.2, "window": 200, "uncertainty_mode": "residual-scale"},
    "metrics": {"pinball_rho": 0.8, "crps_samples": 200, "mcb_theta": 0.05},
    "workers": 1,
}
DEFAULTS["data"]["synthetic"]["center"] = list(DEFAULTS["data"]["synthetic"]["center"])


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, overrides or {})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> dict:
    """Read a config file, or a run manifest whose ``config`` snapshot is reused."""
    if path is None:
        return resolve()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if doc.get("format") == "estgcn-manifest":
        doc = doc["config"]
    return resolve(doc)


def validate(cfg: dict) -> None:
    if cfg["pollutant"] not in NAAQS_THRESHOLDS and cfg["threshold"] is None:
        raise ConfigError(f"no default threshold for pollutant {cfg['pollutant']!r}; set 'threshold'")
    if cfg["betas"]["selection"] not in ("per_scheme", "per_window"):
        raise ConfigError("betas.selection must be 'per_scheme' or 'per_window'")
    grid = cfg["betas"]["grid"]
    if not grid or any(len(p) != 2 for p in grid):
        raise ConfigError("betas.grid must be a non-empty list of [beta1, beta2] pairs")
    if cfg["windows"]["scheme"] not in ("short", "medium", "long"):
        raise ConfigError("windows.scheme must be short, medium or long")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    if int(cfg["seed"]) < 0:
        raise ConfigError("seed must be a non-negative integer")


def threshold_for(cfg: dict) -> float:
    if cfg["threshold"] is not None:
        return float(cfg["threshold"])
    return NAAQS_THRESHOLDS[cfg["pollutant"]]


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    kw = dict(cfg["data"]["synthetic"])
    kw["center"] = tuple(kw["center"])
    return SyntheticSpec(**kw)
