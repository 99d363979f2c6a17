"""Synthetic bi-temporal scenes with planted changes, for desk-scale verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .raster import LabelMask, Raster, RasterPair


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 128
    width: int = 128
    bands: int = 4
    change_frac: float = 0.1
    size_range: tuple[int, int] = (10, 28)
    rects: tuple[tuple[int, int, int, int], ...] | None = None  # explicit (row, col, h, w) squares
    noise_std: float = 0.1
    gain: float = 1.1
    bias: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.bands < 1:
            raise ValueError("scene dimensions must be positive")
        if not 0.0 <= self.change_frac < 0.5:
            raise ValueError(f"change_frac must be in [0, 0.5), got {self.change_frac}")
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise ValueError("size_range must satisfy 1 <= min <= max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def smooth_field(rng: np.random.Generator, bands: int, h: int, w: int) -> np.ndarray:
    """Unit-variance textured field: a shared layout plus per-band detail at two scales."""
    shared = gaussian_filter(rng.standard_normal((h, w)), 4.0, mode="reflect")
    out = np.empty((bands, h, w))
    for b in range(bands):
        coarse = gaussian_filter(rng.standard_normal((h, w)), 3.0, mode="reflect")
        fine = gaussian_filter(rng.standard_normal((h, w)), 1.0, mode="reflect")
        f = 0.6 * shared / shared.std() + 0.6 * coarse / coarse.std() + 0.3 * fine / fine.std()
        out[b] = (f - f.mean()) / f.std()
    return out


def _plant(rng: np.random.Generator, spec: SyntheticSceneSpec) -> list[np.ndarray]:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[:h, :w]
    if spec.rects is not None:
        shapes = []
        for r, c, sh, sw in spec.rects:
            m = np.zeros((h, w), bool)
            m[r : r + sh, c : c + sw] = True
            shapes.append(m)
        return shapes
    shapes = []
    covered = np.zeros((h, w), bool)
    lo, hi = spec.size_range
    for _ in range(1000):
        if covered.mean() >= spec.change_frac:
            break
        sh, sw = rng.integers(lo, hi + 1, size=2)
        r = rng.integers(0, max(1, h - sh + 1))
        c = rng.integers(0, max(1, w - sw + 1))
        if rng.random() < 0.5:
            m = (yy >= r) & (yy < r + sh) & (xx >= c) & (xx < c + sw)
        else:
            cy, cx = r + (sh - 1) / 2, c + (sw - 1) / 2
            m = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        shapes.append(m)
        covered |= m
    return shapes


def generate_synthetic(spec: SyntheticSceneSpec) -> tuple[RasterPair, LabelMask]:
    """t1 is a smooth random field; t2 = gain * t1 + bias + noise, with planted
    regions replaced by an independent field offset away from t1."""
    rng = np.random.default_rng(spec.seed)
    b, h, w = spec.bands, spec.height, spec.width
    t1 = smooth_field(rng, b, h, w)
    base = t1.copy()
    mask = np.zeros((h, w), bool)
    for shape in _plant(rng, spec):
        other = smooth_field(rng, b, h, w)
        offset = rng.choice([-1.0, 1.0], size=b) * rng.uniform(1.0, 2.0, size=b)
        base[:, shape] = other[:, shape] + offset[:, None]
        mask |= shape
    noise = rng.standard_normal((b, h, w)) * spec.noise_std if spec.noise_std > 0 else 0.0
    t2 = spec.gain * base + spec.bias + noise
    return RasterPair(Raster(t1), Raster(t2)), LabelMask(mask.astype(np.uint8))
