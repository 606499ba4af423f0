"""Reconstruction maps from k-space to a real image.

Learned models are written once against the op vocabulary in
:mod:`mrihallu.numerics`: :meth:`ReconModel.apply` runs it on plain arrays,
:meth:`ReconModel.apply_taped` records it on a :class:`~mrihallu.numerics.Tape`.
All forward passes work on batches ``z: [B, coils, H, W]``.
"""

from __future__ import annotations

import numpy as np

from ..mri import CoilMaps, SamplingMask
from ..numerics import ArrayOps, Tape
from .tv import tv_reconstruct

VARIANTS = ("zero_fill", "tv", "unet_lite", "varnet_lite")
_ARRAY_OPS = ArrayOps()
_SCALE_FLOOR = 1e-12


def _mask_array(mask, w):
    """Column mask(s) as ``[B or 1, 1, 1, W]``."""
    if isinstance(mask, SamplingMask):
        mask = mask.pattern
    m = np.asarray(mask, dtype=float)
    if m.shape[-1] != w:
        raise ValueError(f"mask width {m.shape[-1]} != k-space width {w}")
    if m.ndim == 1:
        return m.reshape(1, 1, 1, w)
    if m.ndim == 2:
        return m.reshape(m.shape[0], 1, 1, w)
    raise ValueError(f"mask must be [W] or [B, W], got {m.shape}")


def _maps_array(maps):
    return maps.maps if isinstance(maps, CoilMaps) else np.asarray(maps)


class ReconModel:
    """Base class: ``F(z)`` plus its parameters and hyperparameters."""

    variant = "base"
    differentiable = True

    def __init__(self, shape=None, **hyper):
        self.shape = tuple(shape) if shape is not None else None
        self.hyper = dict(hyper)
        self.params: dict[str, np.ndarray] = {}

    def forward(self, ops, z, mask, maps, params):
        raise NotImplementedError

    def _check(self, z):
        if self.shape is not None and tuple(np.shape(z)[-2:]) != self.shape:
            raise ValueError(f"{self.variant}: input spatial shape {np.shape(z)[-2:]} != model shape {self.shape}")

    def apply(self, z, mask=None, maps=None):
        """Inference on one sample ``[coils, H, W]`` or a batch ``[B, coils, H, W]``."""
        z = np.asarray(z)
        self._check(z)
        single = z.ndim == 3
        zb = z[None] if single else z
        out = self.forward(_ARRAY_OPS, zb, mask, maps, self.params)
        return out[0] if single else out

    def apply_taped(self, tape: Tape, z, mask=None, maps=None, params=None):
        """Record the forward pass; ``z`` is a node (or array) of shape ``[B, coils, H, W]``."""
        if not self.differentiable:
            raise TypeError(f"{self.variant} has no differentiable forward pass")
        self._check(z.value if hasattr(z, "value") else z)
        return self.forward(tape, z, mask, maps, self.params if params is None else params)

    def config(self) -> dict:
        return {"variant": self.variant, "shape": list(self.shape) if self.shape else None, **self.hyper}


class ZeroFill(ReconModel):
    variant = "zero_fill"

    def forward(self, ops, z, mask, maps, params):
        return ops.rss(ops.ifft2c(z), axis=1)


class TVRecon(ReconModel):
    """Classical reference; not differentiable through the tape."""

    variant = "tv"
    differentiable = False

    def __init__(self, shape=None, lam=1e-3, iters=100, eps_tv=1e-2):
        super().__init__(shape, lam=lam, iters=iters, eps_tv=eps_tv)

    def apply(self, z, mask=None, maps=None):
        z = np.asarray(z)
        self._check(z)
        if maps is None:
            maps = CoilMaps(np.ones(z.shape[-3:], dtype=complex))
        elif not isinstance(maps, CoilMaps):
            maps = CoilMaps(np.asarray(maps))
        m = None if mask is None else np.broadcast_to(_mask_array(mask, z.shape[-1])[0, 0], z.shape[-2:])
        h = self.hyper
        return tv_reconstruct(z, maps, h["lam"], h["iters"], mask=m, eps_tv=h["eps_tv"])


def _he(rng, cout, cin, k):
    return rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))


def _conv(ops, x, params, name, relu=True):
    y = ops.conv2d(x, params[name + ".w"], params[name + ".b"])
    return ops.relu(y) if relu else y


def _normalised_zf(ops, z):
    zf = ops.rss(ops.ifft2c(z), axis=1)  # [B, H, W]
    scale = ops.add(ops.amax(zf, axis=(1, 2), keepdims=True), _SCALE_FLOOR)
    return zf, scale


class UNetLite(ReconModel):
    """Two-scale encoder/decoder on the max-normalised zero-filled image.

    Layers: enc1 (1->c1->c1), pool, enc2 (c1->c2->c2), upsample + up (c2->c1),
    concat with enc1 skip, dec (2c1->c1), out (1x1, c1->1).  With
    ``residual=True`` the network predicts a correction added to its input.
    """

    variant = "unet_lite"

    def __init__(self, shape=None, channels=(8, 16), residual=True):
        super().__init__(shape, channels=list(channels), residual=bool(residual))

    def init(self, seed=0):
        c1, c2 = self.hyper["channels"]
        rng = np.random.default_rng(seed)
        layers = [("enc1a", c1, 1, 3), ("enc1b", c1, c1, 3), ("enc2a", c2, c1, 3), ("enc2b", c2, c2, 3),
                  ("up", c1, c2, 3), ("dec", c1, 2 * c1, 3), ("out", 1, c1, 1)]
        self.params = {}
        for name, cout, cin, k in layers:
            w = np.zeros((cout, cin, k, k)) if name == "out" else _he(rng, cout, cin, k)
            self.params[name + ".w"] = w
            self.params[name + ".b"] = np.zeros(cout)
        return self

    def forward(self, ops, z, mask, maps, params):
        zf, scale = _normalised_zf(ops, z)
        x = ops.expand(ops.div(zf, scale), 1)  # [B, 1, H, W]
        e1 = _conv(ops, _conv(ops, x, params, "enc1a"), params, "enc1b")
        e2 = _conv(ops, _conv(ops, ops.avgpool2(e1), params, "enc2a"), params, "enc2b")
        u = _conv(ops, ops.upsample2(e2), params, "up")
        d = _conv(ops, ops.concat([u, e1], axis=1), params, "dec")
        r = _conv(ops, d, params, "out", relu=False)
        if self.hyper["residual"]:
            r = ops.add(x, r)
        b = np.shape(r.value if hasattr(r, "value") else r)
        r = ops.reshape(r, (b[0],) + b[2:])
        return ops.mul(r, scale)


class VarNetLite(ReconModel):
    """Unrolled cascades of data consistency plus a CNN image-domain refinement.

    Each cascade computes
    ``z <- z - eta_k * mask * (z - z_obs) + fft2c(maps * CNN_k(rss(ifft2c(z))))``
    where ``CNN_k`` is three 3x3 conv layers acting on the max-normalised
    image.  The output is the root-sum-of-squares of the final coil images.
    """

    variant = "varnet_lite"

    def __init__(self, shape=None, cascades=4, channels=8, eta_init=1.0):
        super().__init__(shape, cascades=int(cascades), channels=int(channels), eta_init=float(eta_init))

    def init(self, seed=0):
        c = self.hyper["channels"]
        rng = np.random.default_rng(seed)
        self.params = {}
        for k in range(self.hyper["cascades"]):
            self.params[f"c{k}.eta"] = np.array([self.hyper["eta_init"]])
            for name, cout, cin in (("a", c, 1), ("b", c, c), ("out", 1, c)):
                w = np.zeros((cout, cin, 3, 3)) if name == "out" else _he(rng, cout, cin, 3)
                self.params[f"c{k}.{name}.w"] = w
                self.params[f"c{k}.{name}.b"] = np.zeros(cout)
        return self

    def forward(self, ops, z, mask, maps, params):
        zv = z.value if hasattr(z, "value") else z
        w = zv.shape[-1]
        if mask is None:
            mask = np.any(zv.reshape(zv.shape[0], -1, w) != 0, axis=1)
        m = _mask_array(mask, w)
        s = _maps_array(maps) if maps is not None else np.ones(zv.shape[-3:], dtype=complex)
        _, scale = _normalised_zf(ops, z)
        bshape = zv.shape[:1] + zv.shape[2:]
        zk = z
        for k in range(self.hyper["cascades"]):
            img = ops.rss(ops.ifft2c(zk), axis=1)
            x = ops.expand(ops.div(img, scale), 1)
            r = _conv(ops, _conv(ops, x, params, f"c{k}.a"), params, f"c{k}.b")
            r = _conv(ops, r, params, f"c{k}.out", relu=False)
            r = ops.expand(ops.mul(ops.reshape(r, bshape), scale), 1)  # [B, 1, H, W]
            refine = ops.fft2c(ops.mul(r, s))
            dc = ops.mul(ops.mul(ops.sub(zk, z), m), params[f"c{k}.eta"])
            zk = ops.add(ops.sub(zk, dc), refine)
        return ops.rss(ops.ifft2c(zk), axis=1)


def build_model(variant: str, shape=None, **hyper) -> ReconModel:
    classes = {"zero_fill": ZeroFill, "tv": TVRecon, "unet_lite": UNetLite, "varnet_lite": VarNetLite}
    if variant not in classes:
        raise ValueError(f"unknown model variant {variant!r}; choose from {VARIANTS}")
    return classes[variant](shape, **hyper)
