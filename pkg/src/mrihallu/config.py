"""Run configuration: defaults, JSON loading with strict keys, and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

SCHEMA_VERSION = 1

DEFAULTS = {
    "seed": 0,
    "data": {
        "n_samples": 250,
        "n_test": 50,
        "height": 32,
        "width": 32,
        "n_coils": 4,
        "acceleration": 4.0,
        "center_fraction": 0.08,
        "mask_kind": "equispaced",
        "noise_sigma": 0.005,
        "n_ellipses": 6,
        "coil_seed": 0,
        "name": "phantom",
    },
    "model": {
        "variant": "unet_lite",
        "epochs": 20,
        "batch_size": 8,
        "lr": 0.05,
        "momentum": 0.9,
        "loss": "l2",
        "cascades": 4,
    },
    "attack": {
        "epsilon": 1e-2,
        "epsilon_mode": "relative",
        "alpha": None,
        "alpha_ratio": 0.1,
        "iters": 150,
        "clip": "auto",
        "target_shape": "line",
        "length": 11,
        "width": 2,
        "mask_dilation": 2,
        "sampled_only": True,
    },
    "metrics": {
        "bins": 20,
    },
    "detect": {
        "tv_lambda": 1e-3,
        "tv_iters": 100,
        "tv_eps": 1e-2,
        "bins": 20,
    },
}


class ConfigError(ValueError):
    """Invalid configuration (unknown keys, wrong types)."""


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags win)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]
