"""SGD-with-momentum training of the learned reconstructors."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..ksc import sample_maps
from ..mri import Sample
from ..numerics import Tape
from .models import ReconModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    loss: str = "l2"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("l2", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")


def stack_batch(samples: list[Sample], maps=None):
    """Stack samples into ``(z [B,C,H,W], masks [B,W], maps [B,C,H,W], gt [B,H,W])``."""
    z = np.stack([s.kspace for s in samples])
    masks = np.stack([s.mask.pattern.astype(float) for s in samples])
    if maps is None:
        m = np.stack([sample_maps(s).maps for s in samples])
    else:
        m = maps.maps if hasattr(maps, "maps") else np.asarray(maps)
    gt = np.stack([s.ground_truth for s in samples]) if samples[0].ground_truth is not None else None
    return z, masks, m, gt


def _per_sample_loss(tape, out, gt, kind):
    diff = tape.sub(out, gt)
    per = tape.square(diff) if kind == "l2" else tape.abs(diff)
    return tape.sum(per, axis=(1, 2))


def train(model: ReconModel, dataset: list[Sample], config: TrainConfig, maps=None):
    """Fit ``model.params`` in place; returns ``(model, per-epoch mean loss)``.

    Loss is the per-pixel mean of squared (``l2``) or absolute (``l1``)
    error against the ground truth, averaged over the dataset.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if any(s.ground_truth is None for s in dataset):
        raise ValueError("every training sample needs a ground truth image")
    shapes = {s.kspace.shape for s in dataset}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent sample shapes: {sorted(shapes)}")
    z_all, masks_all, maps_all, gt_all = stack_batch(dataset, maps)
    n = len(dataset)
    npix = gt_all[0].size
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        per_sample = np.empty(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            bmaps = maps_all if maps_all.ndim == 3 else maps_all[idx]
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in model.params.items()}
            out = model.apply_taped(tape, z_all[idx], masks_all[idx], bmaps, params=leaves)
            per = _per_sample_loss(tape, out, gt_all[idx], config.loss)
            loss = tape.mul(tape.sum(per), 1.0 / (len(idx) * npix))
            if not np.isfinite(loss.value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; "
                    f"lower the learning rate (currently {config.lr})"
                )
            per_sample[idx] = per.value / npix
            grads = tape.backward(loss)
            for k, leaf in leaves.items():
                velocity[k] = config.momentum * velocity[k] + grads[leaf]
                model.params[k] = model.params[k] - config.lr * velocity[k]
        trace.append(float(np.mean(per_sample)))
        log.info("epoch %d loss %.6g", epoch, trace[-1])
    return model, trace
