"""Targeted hallucination attack: masked iterative FGSM on the real part of k-space."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .numerics import ArrayOps, Tape

log = logging.getLogger(__name__)
_ARRAY_OPS = ArrayOps()


class AttackError(RuntimeError):
    """Numeric failure during the attack (non-finite loss)."""


@dataclass(frozen=True)
class AttackSpec:
    """Attack hyperparameters.

    In ``relative`` mode ``epsilon`` is a fraction of ``max|Re(z)|``; in
    ``absolute`` mode it is used as given.  The step is ``alpha`` when set
    (absolute mode only), else ``alpha_ratio * epsilon``.  ``clip="auto"`` clips ``Re(z) + delta``
    to the sample's own ``[min Re(z), max Re(z)]``; ``clip="unit"`` uses
    ``[0, 1]``; ``clip="none"`` disables it.
    """

    epsilon: float = 1e-2
    epsilon_mode: str = "relative"
    alpha: float | None = None
    alpha_ratio: float = 0.1
    iters: int = 150
    clip: str = "auto"
    target_shape: str = "line"
    length: int = 11
    width: int = 2
    mask_dilation: int = 2
    sampled_only: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon_mode not in ("relative", "absolute"):
            raise ValueError(f"epsilon_mode must be relative or absolute, got {self.epsilon_mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.clip not in ("auto", "unit", "none"):
            raise ValueError(f"clip must be auto, unit or none, got {self.clip!r}")
        if self.target_shape not in ("line", "rectangle", "ellipse"):
            raise ValueError(f"unknown target shape {self.target_shape!r}")
        if self.length < 1 or self.width < 1 or self.mask_dilation < 0:
            raise ValueError("target length/width must be >= 1 and dilation >= 0")
        if self.alpha is None:
            if not 0 <= self.alpha_ratio <= 1:
                raise ValueError("alpha_ratio must lie in [0, 1]")
        elif self.epsilon_mode == "relative":
            raise ValueError("an absolute alpha needs epsilon_mode='absolute'; use alpha_ratio instead")
        elif not 0 <= self.alpha <= self.epsilon:
            raise ValueError(f"need 0 <= alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")

    def budget(self, z) -> tuple[float, float]:
        """Absolute ``(epsilon, alpha)`` for k-space ``z``."""
        if self.epsilon_mode == "relative":
            eps = self.epsilon * float(np.max(np.abs(np.real(z))))
        else:
            eps = self.epsilon
        alpha = self.alpha if self.alpha is not None else self.alpha_ratio * eps
        return eps, alpha

    def clip_bounds(self, z) -> tuple[float, float]:
        re = np.real(z)
        if self.clip == "unit":
            return 0.0, 1.0
        if self.clip == "none":
            return -np.inf, np.inf
        return float(re.min()), float(re.max())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    delta_star: np.ndarray
    best_loss: float
    loss_trace: list
    perturbed_kspace: np.ndarray
    perturbed_recon: np.ndarray
    clean_recon: np.ndarray
    target: np.ndarray
    region: np.ndarray
    epsilon: float
    alpha: float
    clip_bounds: tuple
    baseline_loss: float
    flags: list = field(default_factory=list)


def shape_support(shape_hw, spec: AttackSpec) -> np.ndarray:
    """Boolean support of the target shape, centred in the image."""
    h, w = shape_hw
    cy, cx = h // 2, w // 2
    sup = np.zeros((h, w), dtype=bool)
    if spec.target_shape == "line":
        rows = (cy - spec.width // 2, cy - spec.width // 2 + spec.width)
        cols = (cx - spec.length // 2, cx - spec.length // 2 + spec.length)
    elif spec.target_shape == "rectangle":
        rows = (cy - spec.width // 2, cy - spec.width // 2 + spec.width)
        cols = (cx - spec.length // 2, cx - spec.length // 2 + spec.length)
    else:
        ry, rx = spec.width / 2, spec.length / 2
        yy, xx = np.mgrid[0:h, 0:w]
        inside = ((yy - cy + 0.5) / ry) ** 2 + ((xx - cx + 0.5) / rx) ** 2 <= 1.0
        rows = (int(np.floor(cy - ry)), int(np.ceil(cy + ry)))
        cols = (int(np.floor(cx - rx)), int(np.ceil(cx + rx)))
        if rows[0] < 0 or cols[0] < 0 or rows[1] > h or cols[1] > w:
            raise ValueError(f"target ellipse {spec.width}x{spec.length} exceeds image {h}x{w}")
        return inside
    if rows[0] < 0 or cols[0] < 0 or rows[1] > h or cols[1] > w:
        raise ValueError(f"target {spec.target_shape} {spec.width}x{spec.length} exceeds image {h}x{w}")
    sup[rows[0]:rows[1], cols[0]:cols[1]] = True
    return sup


def render_target(clean_recon, spec: AttackSpec):
    """Draw a white shape at the image centre.

    Returns ``(target, region)``: ``target`` equals ``clean_recon`` except on
    the shape, where it takes ``max(clean_recon)``; ``region`` is the shape's
    support dilated by ``spec.mask_dilation`` pixels (8-neighbourhood), as 0/1
    floats.
    """
    clean_recon = np.asarray(clean_recon, dtype=float)
    if not np.all(np.isfinite(clean_recon)):
        raise ValueError("clean reconstruction must be finite")
    sup = shape_support(clean_recon.shape, spec)
    target = clean_recon.copy()
    target[sup] = clean_recon.max()
    region = sup
    if spec.mask_dilation > 0:
        region = ndimage.binary_dilation(sup, structure=np.ones((3, 3), bool), iterations=spec.mask_dilation)
    return target, region.astype(float)


def attack_loss(ops, recon_pert, recon_clean, target, region):
    """``||m (F' - y_t)||^2 / ||m||_1 + ||(1 - m)(F' - F)||^2 / ||1 - m||_1``.

    ``ops`` is a :class:`~mrihallu.numerics.Tape` (differentiable) or
    :class:`~mrihallu.numerics.ArrayOps`.  ``recon_pert`` may carry a leading
    batch axis, in which case one loss per batch item is returned.
    """
    region = np.asarray(region, dtype=float)
    inside = float(region.sum())
    outside = float((1.0 - region).sum())
    if inside == 0 or outside == 0:
        raise ValueError("attack region must be neither empty nor the whole image")
    axes = (-2, -1)
    t1 = ops.sum(ops.square(ops.mul(ops.sub(recon_pert, target), region)), axis=axes)
    t2 = ops.sum(ops.square(ops.mul(ops.sub(recon_pert, recon_clean), 1.0 - region)), axis=axes)
    return ops.add(ops.mul(t1, 1.0 / inside), ops.mul(t2, 1.0 / outside))


def perturb(z, delta, bounds):
    """``clip(Re(z) + delta, lo, hi) + 1j * Im(z)`` with ``Im(z)`` copied bit for bit."""
    out = np.empty(np.shape(z), dtype=complex)
    out.real = np.clip(np.real(z) + delta, *bounds)
    out.imag = np.imag(z)
    return out


def masked_iterative_fgsm(model, z, spec: AttackSpec, *, mask=None, maps=None,
                          target=None, region=None) -> AttackResult:
    """Run the attack on one k-space sample ``z`` of shape ``[coils, H, W]``.

    Starting from ``delta ~ U(-eps, eps)``, each iteration evaluates the loss
    at the clipped perturbed sample, keeps the lowest-loss ``delta`` seen so
    far, then steps ``delta <- clip(delta - alpha * sign(grad), -eps, eps)``.
    ``sign(0) = 0``.  With ``spec.sampled_only`` the perturbation is confined
    to acquired k-space columns.
    """
    if not model.differentiable:
        raise TypeError(f"cannot attack non-differentiable reconstructor {model.variant!r}")
    z = np.asarray(z, dtype=complex)
    eps, alpha = spec.budget(z)
    bounds = spec.clip_bounds(z)
    re, im = np.real(z), np.imag(z)
    zb = z[None]
    clean = model.apply(zb, mask, maps)[0]
    if not np.all(np.isfinite(clean)):
        raise AttackError("non-finite clean reconstruction; check the model weights")
    if target is None or region is None:
        target, region = render_target(clean, spec)
    flags = []
    # a target within 0.1% of the clean peak is invisible
    if np.max(np.abs(target - clean)) <= 1e-3 * np.max(np.abs(clean)):
        flags.append("degenerate_target")
        log.warning("target identical to clean reconstruction; attack has no visible goal")

    support = np.ones_like(re)
    if spec.sampled_only:
        if mask is not None:
            pattern = mask.pattern if hasattr(mask, "pattern") else np.asarray(mask)
            support = np.broadcast_to(np.asarray(pattern, dtype=float), re.shape).copy()
        else:
            support = np.broadcast_to(np.any(z.reshape(-1, z.shape[-1]) != 0, axis=0).astype(float),
                                      re.shape).copy()
    rng = np.random.default_rng(spec.seed)
    delta = rng.uniform(-eps, eps, size=re.shape) * support
    best = delta.copy()
    best_loss = np.inf
    trace = []
    lo, hi = bounds

    def loss_and_grad(d):
        tape = Tape()
        dn = tape.leaf(d[None])
        zr = tape.clip(tape.add(dn, re[None]), lo, hi)
        zadv = tape.add(zr, 1j * im[None])
        out = model.apply_taped(tape, zadv, mask, maps)
        loss = tape.sum(attack_loss(tape, out, clean, target, region))
        return float(loss.value), tape.backward(loss)[dn][0]

    for t in range(spec.iters):
        loss, grad = loss_and_grad(delta)
        if not np.isfinite(loss):
            raise AttackError(f"non-finite attack loss at iteration {t}; trace so far: {trace}")
        trace.append(loss)
        if loss < best_loss:
            best, best_loss = delta.copy(), loss
        delta = np.clip(delta - alpha * np.sign(grad) * support, -eps, eps)

    z_adv = perturb(z, best, bounds)
    pert = model.apply(z_adv[None], mask, maps)[0]
    baseline = float(attack_loss(_ARRAY_OPS, clean, clean, target, region))
    return AttackResult(best, float(best_loss), trace, z_adv, pert, clean, target, region,
                        eps, alpha, bounds, baseline, flags)
