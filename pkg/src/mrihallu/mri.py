"""Undersampled Cartesian MRI acquisition on synthetic phantoms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import fft2c, ifft2c


@dataclass(frozen=True)
class SamplingMask:
    """Column mask shared by every row of k-space."""

    pattern: np.ndarray
    acceleration: float
    center_fraction: float

    @property
    def width(self) -> int:
        return int(self.pattern.size)

    def as_2d(self, height: int) -> np.ndarray:
        return np.broadcast_to(self.pattern.astype(float), (height, self.width))

    def center_columns(self) -> np.ndarray:
        return _center_columns(self.width, self.center_fraction)


@dataclass(frozen=True)
class CoilMaps:
    maps: np.ndarray  # complex [coils, h, w]
    smoothness: float = 0.5

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


@dataclass
class Sample:
    id: str
    kspace: np.ndarray  # complex [coils, h, w]
    mask: SamplingMask
    ground_truth: np.ndarray | None = None
    noise_sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.kspace.shape


def _center_columns(width: int, center_fraction: float) -> np.ndarray:
    n = min(width, math.ceil(center_fraction * width))
    start = width // 2 - n // 2
    return np.arange(start, start + n)


def make_mask(width: int, acceleration: float, center_fraction: float,
              kind: str = "equispaced", seed: int = 0) -> SamplingMask:
    """Cartesian mask: a fully sampled centre band plus equispaced or random columns.

    The total column count is ``round(width / acceleration)`` unless the centre
    band alone is larger; a centre band more than one column above
    ``width / acceleration`` is an error.
    """
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    if not 0 < center_fraction < 1:
        raise ValueError(f"center_fraction must lie in (0, 1), got {center_fraction}")
    if kind not in ("equispaced", "random"):
        raise ValueError(f"unknown mask kind {kind!r}")
    pattern = np.zeros(width, dtype=np.int8)
    if acceleration == 1:
        pattern[:] = 1
        return SamplingMask(pattern, float(acceleration), float(center_fraction))

    center = _center_columns(width, center_fraction)
    target = max(1, round(width / acceleration))
    if center.size > width / acceleration + 1:
        raise ValueError(
            f"center band of {center.size} columns exceeds the {target} columns "
            f"allowed at acceleration {acceleration}"
        )
    pattern[center] = 1
    extra = target - center.size
    others = np.flatnonzero(pattern == 0)
    rng = np.random.default_rng(seed)
    if extra > 0:
        if kind == "equispaced":
            step = others.size / extra
            offset = rng.uniform(0, step)
            picks = others[np.floor(offset + step * np.arange(extra)).astype(int)]
        else:
            picks = rng.choice(others, size=extra, replace=False)
        pattern[picks] = 1
    return SamplingMask(pattern, float(acceleration), float(center_fraction))


def gen_phantom(h: int, w: int, n_ellipses: int, seed: int) -> np.ndarray:
    """Sum of random rotated ellipses clipped to [0, 1].

    The first ellipse is a large body outline; the rest add or remove
    intensity inside it, giving piecewise-constant structure.
    """
    if n_ellipses < 1:
        raise ValueError("n_ellipses must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    # normalised coordinates in [-1, 1]
    ys = (yy + 0.5) / h * 2 - 1
    xs = (xx + 0.5) / w * 2 - 1
    img = np.zeros((h, w))
    # inner ellipses at least ~5 px across where the grid allows it
    lo = min(max(0.1, 5.0 / min(h, w)), 0.5)
    hi = max(lo + 0.05, 0.35)
    for i in range(n_ellipses):
        if i == 0:
            cy, cx = rng.uniform(-0.1, 0.1, size=2)
            ay, ax = rng.uniform(0.6, 0.85, size=2)
            val = rng.uniform(0.4, 0.7)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, size=2)
            ay, ax = rng.uniform(lo, hi, size=2)
            val = rng.uniform(-0.3, 0.5)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xs - cx) * c + (ys - cy) * s
        v = -(xs - cx) * s + (ys - cy) * c
        img[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] += val
    return np.clip(img, 0.0, 1.0)


def make_coil_maps(h: int, w: int, n_coils: int, seed: int = 0,
                   smoothness: float = 0.5) -> CoilMaps:
    """Smooth Gaussian-bump coil profiles normalised to unit root-sum-of-squares."""
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    if n_coils == 1:
        return CoilMaps(np.ones((1, h, w), dtype=complex), smoothness)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    ys = (yy + 0.5) / h * 2 - 1
    xs = (xx + 0.5) / w * 2 - 1
    maps = np.empty((n_coils, h, w), dtype=complex)
    angle0 = rng.uniform(0, 2 * np.pi)
    for c in range(n_coils):
        a = angle0 + 2 * np.pi * c / n_coils
        cy, cx = 1.2 * np.sin(a), 1.2 * np.cos(a)
        mag = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * smoothness ** 2 * 4))
        ky, kx = rng.uniform(-1, 1, size=2)
        phase = 0.0 if c == 0 else np.pi / 2 * (ky * ys + kx * xs)
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilMaps(maps / rss, smoothness)


def rss_combine(coil_images: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(coil_images) ** 2, axis=0))


def forward_model(x: np.ndarray, maps: CoilMaps, mask: SamplingMask,
                  noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """``mask * fft2c(maps * x) + e``, noise only on sampled entries."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    x = np.asarray(x)
    if x.shape != maps.maps.shape[1:]:
        raise ValueError(f"image shape {x.shape} does not match coil maps {maps.maps.shape[1:]}")
    if mask.width != x.shape[1]:
        raise ValueError(f"mask width {mask.width} does not match image width {x.shape[1]}")
    m = mask.as_2d(x.shape[0])
    y = fft2c(maps.maps * x) * m
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        e = rng.normal(0, noise_sigma, y.shape) + 1j * rng.normal(0, noise_sigma, y.shape)
        y = y + e * m
    return y


def zero_fill(z: np.ndarray) -> np.ndarray:
    """Per-coil inverse FFT followed by root-sum-of-squares (magnitude for one coil)."""
    z = np.asarray(z)
    if z.ndim == 2:
        z = z[None]
    return rss_combine(ifft2c(z))


def make_sample(idx: int, *, h: int, w: int, n_coils: int, acceleration: float,
                center_fraction: float, mask_kind: str = "equispaced", noise_sigma: float = 0.0,
                n_ellipses: int = 6, seed: int = 0, coil_seed: int = 0, maps: CoilMaps | None = None) -> Sample:
    """Phantom, mask and noisy k-space for one dataset index, seeded from ``(seed, idx)``."""
    ss = np.random.SeedSequence([seed, idx])
    phantom_seed, mask_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    x = gen_phantom(h, w, n_ellipses, phantom_seed)
    if maps is None:
        maps = make_coil_maps(h, w, n_coils, coil_seed)
    mask = make_mask(w, acceleration, center_fraction, mask_kind, mask_seed)
    y = forward_model(x, maps, mask, noise_sigma, np.random.default_rng(noise_seed))
    return Sample(f"sample_{idx:04d}", y, mask, x, noise_sigma,
                  {"coil_seed": coil_seed, "coil_smoothness": maps.smoothness})
