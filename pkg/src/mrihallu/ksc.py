"""KSC v1 dataset container.

Each sample is three files sharing a stem:

* ``<stem>.json``     header (schema_version, id, shape, dtype, mask, ...)
* ``<stem>.ksp.bin``  k-space, little-endian float64 (re, im) pairs, row-major [coils][h][w]
* ``<stem>.gt.bin``   ground truth, little-endian float64 [h][w] (when present)

The header's ``dtype`` is the literal string ``"c64le"``: complex values made
of two 64-bit little-endian floats.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mri import CoilMaps, Sample, SamplingMask, make_coil_maps

SCHEMA_VERSION = 1
FORMAT = "KSC"
DTYPE = "c64le"


class KSCError(ValueError):
    """Malformed or inconsistent KSC files."""


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_complex(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.complex128)
    inter = np.empty(arr.shape + (2,), dtype="<f8")
    inter[..., 0] = arr.real
    inter[..., 1] = arr.imag
    path.write_bytes(inter.tobytes())


def read_complex(path: Path, shape) -> np.ndarray:
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != 2 * int(np.prod(shape)):
        raise KSCError(f"{path}: expected {2 * int(np.prod(shape))} float64 values, found {raw.size}")
    # reinterpret pairs in place; arithmetic recombination would drop signed zeros
    return raw.astype("<f8").view(np.complex128).reshape(tuple(shape)).copy()


def write_real(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_real(path: Path, shape) -> np.ndarray:
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise KSCError(f"{path}: expected {int(np.prod(shape))} float64 values, found {raw.size}")
    return raw.reshape(shape).astype(float)


def write_sample(directory: Path, sample: Sample, extra: dict | None = None) -> Path:
    """Write one sample; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = sample.id
    header = {
        "format": FORMAT,
        "schema_version": SCHEMA_VERSION,
        "id": sample.id,
        "shape": list(sample.kspace.shape),
        "dtype": DTYPE,
        "mask": [int(v) for v in sample.mask.pattern],
        "acceleration": sample.mask.acceleration,
        "center_fraction": sample.mask.center_fraction,
        "noise_sigma": sample.noise_sigma,
        "has_ground_truth": sample.ground_truth is not None,
        "kspace_file": f"{stem}.ksp.bin",
    }
    if sample.ground_truth is not None:
        header["ground_truth_file"] = f"{stem}.gt.bin"
    header.update(sample.meta)
    if extra:
        header.update(extra)
    write_complex(directory / header["kspace_file"], sample.kspace)
    if sample.ground_truth is not None:
        write_real(directory / header["ground_truth_file"], sample.ground_truth)
    path = directory / f"{stem}.json"
    _dump_json(header, path)
    return path


_CORE_KEYS = {
    "format", "schema_version", "id", "shape", "dtype", "mask", "acceleration",
    "center_fraction", "noise_sigma", "has_ground_truth", "kspace_file", "ground_truth_file",
}


def read_sample(header_path: Path) -> Sample:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise KSCError(f"cannot read KSC header {header_path}: {exc}") from exc
    if header.get("format") != FORMAT or header.get("schema_version") != SCHEMA_VERSION:
        raise KSCError(f"{header_path}: not a KSC v{SCHEMA_VERSION} header")
    if header.get("dtype") != DTYPE:
        raise KSCError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    shape = header["shape"]
    if len(shape) != 3 or len(header["mask"]) != shape[2]:
        raise KSCError(f"{header_path}: inconsistent shape {shape} / mask length {len(header['mask'])}")
    base = header_path.parent
    kspace = read_complex(base / header["kspace_file"], shape)
    gt = None
    if header["has_ground_truth"]:
        gt = read_real(base / header["ground_truth_file"], shape[1:])
    mask = SamplingMask(np.array(header["mask"], dtype=np.int8),
                        float(header["acceleration"]), float(header["center_fraction"]))
    meta = {k: v for k, v in header.items() if k not in _CORE_KEYS}
    return Sample(header["id"], kspace, mask, gt, float(header["noise_sigma"]), meta)


def list_samples(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).glob("*.json"))


def read_dataset(directory: Path) -> list[Sample]:
    paths = list_samples(directory)
    if not paths:
        raise KSCError(f"no KSC samples in {directory}")
    return [read_sample(p) for p in paths]


def sample_maps(sample: Sample) -> CoilMaps:
    """Regenerate the synthetic coil maps recorded in a sample's header."""
    c, h, w = sample.kspace.shape
    return make_coil_maps(h, w, c, int(sample.meta.get("coil_seed", 0)),
                          float(sample.meta.get("coil_smoothness", 0.5)))
