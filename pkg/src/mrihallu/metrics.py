"""Image-quality metrics and Table-1-style paired reporting.

All metrics take the reference image first.  SSIM uses a 7x7 uniform window
over valid (fully inside) positions, sample (N-1) variances, and data range
``L = max(reference)``; this differs from scikit-image's Gaussian default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .mri import zero_fill

METRICS = ("psnr", "nrmse", "ssim")
SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty images")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(max(a)^2 / MSE)``; ``inf`` when the images are identical."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(float(np.max(a)) ** 2 / mse)


def nrmse(a, b) -> float:
    """``||a - b|| / ||a||``."""
    a, b = _pair(a, b)
    ref = float(np.linalg.norm(a))
    if ref == 0:
        raise ValueError("nrmse reference image has zero norm")
    return float(np.linalg.norm(a - b)) / ref


def _data_range(a, b):
    L = float(np.max(a))
    if L <= 0:
        L = float(max(np.max(np.abs(a)), np.max(np.abs(b))))
    return L


def ssim_map(a, b, data_range=None):
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    L = _data_range(a, b) if data_range is None else data_range
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    n = SSIM_WINDOW * SSIM_WINDOW
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    va = (da * da).sum(axis=(-2, -1)) / (n - 1)
    vb = (db * db).sum(axis=(-2, -1)) / (n - 1)
    cov = (da * db).sum(axis=(-2, -1)) / (n - 1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean local SSIM; two all-zero images score 1."""
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    if _data_range(a, b) == 0:
        return 1.0
    return float(np.mean(ssim_map(a, b)))


def metric_triple(a, b) -> dict:
    """``{psnr, nrmse, ssim}`` plus a list of flags for degenerate cases."""
    a, b = _pair(a, b)
    flags = []
    p = psnr(a, b)
    if math.isinf(p):
        flags.append("psnr_infinite")
    if np.linalg.norm(a) == 0:
        flags.append("nrmse_zero_reference")
        n = math.nan
    else:
        n = nrmse(a, b)
    if _data_range(a, b) == 0:
        flags.append("ssim_constant_zero")
    return {"psnr": p, "nrmse": n, "ssim": ssim(a, b), "flags": flags}


def jsonable(triple: dict) -> dict:
    """Infinite/NaN values become ``null``; the flags say why."""
    out = {}
    for k, v in triple.items():
        out[k] = None if isinstance(v, float) and not math.isfinite(v) else v
    return out


@dataclass
class MetricReport:
    sample_id: str
    input_pair: dict
    recon_pair: dict
    objective: float | None = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "input_pair": jsonable(self.input_pair),
            "recon_pair": jsonable(self.recon_pair),
            "objective": self.objective,
            "flags": list(self.flags),
        }


def report_pair(z, delta, model, *, mask=None, maps=None, perturbed=None,
                objective=None, sample_id="") -> MetricReport:
    """Metrics on (ZF(z), ZF(z~)) and (F(z), F(z~)).

    ``z~`` is ``perturbed`` when given (e.g. the attack's clipped k-space),
    else ``z + delta``.
    """
    if delta is None:
        raise ValueError("report_pair needs the perturbation delta")
    z = np.asarray(z)
    zt = np.asarray(perturbed) if perturbed is not None else z + np.asarray(delta)
    inp = metric_triple(zero_fill(z), zero_fill(zt))
    rec = metric_triple(model.apply(z, mask, maps), model.apply(zt, mask, maps))
    flags = [f"input_{f}" for f in inp["flags"]] + [f"recon_{f}" for f in rec["flags"]]
    return MetricReport(sample_id, inp, rec, objective, flags)


def aggregate(reports: list[MetricReport]) -> dict:
    """Mean and population std per pair and metric, ignoring non-finite values.

    Returns ``{pair: {metric: {"mean", "std", "n"}}}``.
    """
    out = {}
    for pair in ("input_pair", "recon_pair"):
        out[pair] = {}
        for m in METRICS:
            vals = np.array([getattr(r, pair)[m] for r in reports], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                out[pair][m] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
            else:
                out[pair][m] = {"mean": None, "std": None, "n": 0}
    return out
