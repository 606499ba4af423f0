"""Reference-free detection: compare learned reconstructions against TV.

For each sample the (TV(z'), F(z')) pair is scored with PSNR/NRMSE/SSIM, TV
taken as the reference, once for clean and once for attacked k-space.  The
two score distributions are then compared by histogram overlap and by the
ROC of a single-threshold detector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackSpec, masked_iterative_fgsm
from .metrics import METRICS, jsonable, metric_triple
from .recon.tv import tv_reconstruct

log = logging.getLogger(__name__)


@dataclass
class DetectionRecord:
    sample_id: str
    contaminated: bool
    metrics: dict

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "contaminated": self.contaminated,
                "metrics": jsonable(self.metrics)}


@dataclass
class DetectorEval:
    metric: str
    direction: str  # "higher" or "lower" values flagged as contaminated
    thresholds: list
    fpr: list
    tpr: list
    auc: float
    overlap: float
    n_clean: int
    n_contaminated: int
    histogram: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "direction": self.direction, "auc": self.auc,
            "overlap": self.overlap, "n_clean": self.n_clean, "n_contaminated": self.n_contaminated,
            "thresholds": [t if math.isfinite(t) else ("inf" if t > 0 else "-inf") for t in self.thresholds],
            "fpr": self.fpr, "tpr": self.tpr,
        }


def pair_metrics(z, model, maps, mask, tv_params: dict):
    """Metrics of F(z) against TV(z), or ``None`` when TV fails."""
    tv, info = tv_reconstruct(z, maps, tv_params.get("lam", 1e-3), tv_params.get("iters", 100),
                              mask=np.broadcast_to(mask.pattern.astype(float), z.shape[-2:]),
                              eps_tv=tv_params.get("eps_tv", 1e-2), return_info=True)
    if not info.converged:
        return None
    return metric_triple(tv, model.apply(z, mask, maps))


def run_detection_experiment(samples, model, attack_spec: AttackSpec, tv_params: dict, maps_for,
                             perturbed=None) -> list[DetectionRecord]:
    """Two records per sample: clean and contaminated.

    ``maps_for(sample)`` returns the coil maps of a sample.  ``perturbed``
    optionally maps sample id to precomputed attacked k-space; otherwise the
    attack is run here with seed ``attack_spec.seed + index``.
    """
    records = []
    for i, s in enumerate(samples):
        maps = maps_for(s)
        if perturbed is not None and s.id in perturbed:
            zt = perturbed[s.id]
        else:
            spec = AttackSpec(**{**attack_spec.to_dict(), "seed": attack_spec.seed + i})
            zt = masked_iterative_fgsm(model, s.kspace, spec, mask=s.mask, maps=maps).perturbed_kspace
        clean = pair_metrics(s.kspace, model, maps, s.mask, tv_params)
        cont = pair_metrics(zt, model, maps, s.mask, tv_params)
        if clean is None or cont is None:
            log.warning("TV reconstruction failed for %s; sample skipped", s.id)
            continue
        records.append(DetectionRecord(s.id, False, clean))
        records.append(DetectionRecord(s.id, True, cont))
    return records


def histogram_overlap(values_clean, values_contaminated, bins: int = 20):
    """Overlap coefficient ``sum_b min(p_clean[b], p_cont[b])`` on shared bins.

    Returns ``(overlap, edges, p_clean, p_cont)``.
    """
    a = np.asarray(values_clean, dtype=float)
    b = np.asarray(values_contaminated, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both value lists must be nonempty")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        edges = np.linspace(lo - 0.5, hi + 0.5, bins + 1)
    else:
        edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0] / a.size
    pb = np.histogram(b, edges)[0] / b.size
    return float(np.minimum(pa, pb).sum()), edges, pa, pb


def _roc(scores_clean, scores_cont):
    # integer counts keep the trapezoid sum exact for tied distributions
    pooled = np.unique(np.concatenate([scores_clean, scores_cont]))
    mids = (pooled[:-1] + pooled[1:]) / 2
    thresholds = np.concatenate([[np.inf], mids[::-1], [-np.inf]])
    P, N = scores_cont.size, scores_clean.size
    tp = [int(np.sum(scores_cont > t)) for t in thresholds]
    fp = [int(np.sum(scores_clean > t)) for t in thresholds]
    area2 = sum((fp[i + 1] - fp[i]) * (tp[i] + tp[i + 1]) for i in range(len(thresholds) - 1))
    auc = area2 / (2 * P * N)
    return thresholds, [f / N for f in fp], [t / P for t in tp], auc


def threshold_detector_eval(records, metric: str, bins: int = 20) -> DetectorEval:
    """ROC/AUC of ``value > threshold`` (or ``<``) as a contamination test.

    Thresholds are all midpoints between sorted unique values plus +-inf.
    The direction giving the larger AUC is chosen and reported.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    vals = {False: [], True: []}
    for r in records:
        v = r.metrics.get(metric)
        if v is None or not math.isfinite(v):
            continue
        vals[r.contaminated].append(v)
    clean, cont = np.array(vals[False]), np.array(vals[True])
    if clean.size == 0 or cont.size == 0:
        raise ValueError(f"threshold evaluation needs both classes with finite {metric} values")
    th, fpr, tpr, auc = _roc(clean, cont)
    direction = "higher"
    th_lo, fpr_lo, tpr_lo, auc_lo = _roc(-clean, -cont)
    if auc_lo > auc:
        direction, th, fpr, tpr, auc = "lower", -th_lo, fpr_lo, tpr_lo, auc_lo
    overlap, edges, pa, pb = histogram_overlap(clean, cont, bins)
    hist = {"edges": edges.tolist(), "p_clean": pa.tolist(), "p_cont": pb.tolist()}
    return DetectorEval(metric, direction, [float(t) for t in th], fpr, tpr, float(auc), overlap,
                        int(clean.size), int(cont.size), hist)
