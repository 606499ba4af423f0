"""Model checkpoints: JSON header plus a raw little-endian float64 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .models import build_model

SCHEMA_VERSION = 1


def save_checkpoint(model, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    manifest, chunks, offset = [], [], 0
    for name, arr in model.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    cfg = model.config()
    header = {
        "format": "mrihallu-checkpoint",
        "schema_version": SCHEMA_VERSION,
        "variant": cfg.pop("variant"),
        "shape": cfg.pop("shape"),
        "hyperparameters": cfg,
        "dtype": "float64le",
        "blob": blob_path.name,
        "tensors": manifest,
    }
    blob_path.write_bytes(b"".join(chunks))
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header_path, blob_path


def load_checkpoint(path):
    path = Path(path)
    header_path = path if path.suffix == ".json" else path.with_suffix(".json")
    header = json.loads(header_path.read_text())
    if header.get("format") != "mrihallu-checkpoint" or header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{header_path}: not a checkpoint header")
    model = build_model(header["variant"], header["shape"], **header["hyperparameters"])
    raw = np.frombuffer((header_path.parent / header["blob"]).read_bytes(), dtype="<f8")
    total = sum(t["count"] for t in header["tensors"])
    if raw.size != total:
        raise ValueError(f"{header['blob']}: expected {total} values, found {raw.size}")
    model.params = {
        t["name"]: raw[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"]).astype(float)
        for t in header["tensors"]
    }
    return model
