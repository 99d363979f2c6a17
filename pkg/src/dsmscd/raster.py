"""Multi-band rasters, label masks and the BRAS on-disk format.

BRAS layout: one ASCII header line ``BRAS <bands> <height> <width>\\n``
followed by ``bands*height*width`` little-endian float32 values in
(band, row, col) order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

UNCHANGED = 0
CHANGED = 1
UNDEFINED = 255

_MAGIC = b"BRAS"


class RasterFormatError(ValueError):
    """Raised when a raster file is malformed or does not match its header."""


@dataclass(frozen=True)
class Raster:
    """A georeferencing-free multi-band image, values shaped (bands, rows, cols)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"raster values must be (bands, h, w) with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("raster values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class RasterPair:
    t1: Raster
    t2: Raster

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise ValueError(f"pair shape mismatch: {self.t1.shape} vs {self.t2.shape}")

    @property
    def height(self) -> int:
        return self.t1.height

    @property
    def width(self) -> int:
        return self.t1.width

    @property
    def bands(self) -> int:
        return self.t1.bands

    def swapped(self) -> RasterPair:
        return RasterPair(self.t2, self.t1)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel labels: 0 unchanged, 1 changed, 255 undefined."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"label mask must be 2-D, got shape {lab.shape}")
        if not np.all(np.isin(lab, (UNCHANGED, CHANGED, UNDEFINED))):
            raise ValueError("label mask values must be in {0, 1, 255}")
        lab = lab.astype(np.uint8, copy=True)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def defined(self) -> np.ndarray:
        return self.labels != UNDEFINED


def check_aligned(pair: RasterPair, mask: LabelMask) -> None:
    if (pair.height, pair.width) != (mask.height, mask.width):
        raise ValueError(
            f"mask {mask.height}x{mask.width} does not match pair {pair.height}x{pair.width}"
        )


# --------------------------------------------------------------------------- I/O


def write_bras(path: str | os.PathLike, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None]
    b, h, w = values.shape
    header = f"BRAS {b} {h} {w}\n".encode("ascii")
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_bras(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such raster file: {path}")
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0 or nl > 64:
        raise RasterFormatError(f"{path}: missing BRAS header line")
    parts = data[:nl].split()
    if len(parts) != 4 or parts[0] != _MAGIC:
        raise RasterFormatError(f"{path}: malformed header {data[:nl]!r}")
    try:
        b, h, w = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: non-integer dimensions in header") from exc
    if min(b, h, w) < 1:
        raise RasterFormatError(f"{path}: dimensions must be positive")
    payload = data[nl + 1 :]
    if len(payload) != 4 * b * h * w:
        raise RasterFormatError(
            f"{path}: header declares {b}x{h}x{w} floats but payload has {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(b, h, w)


def load_raster(path: str | os.PathLike, format: str = "band-raster") -> Raster:
    """Read a raster in ``band-raster`` (BRAS) or ``png8`` format."""
    if format == "band-raster":
        return Raster(read_bras(path).astype(np.float64))
    if format == "png8":
        return Raster(_read_8bit(path).astype(np.float64))
    raise ValueError(f"unknown raster format {format!r}")


def save_raster(path: str | os.PathLike, r: Raster) -> None:
    write_bras(path, r.values)


def _read_8bit(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise RasterFormatError(f"{path}: only 8-bit 1- or 3-channel images supported, got {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise RasterFormatError(f"{path}: cannot decode image") from exc
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, -1, 0)


def load_mask(path: str | os.PathLike, format: str = "band-raster") -> LabelMask:
    if format == "band-raster":
        v = read_bras(path)
        if v.shape[0] != 1:
            raise RasterFormatError(f"{path}: label mask must have one band, got {v.shape[0]}")
        return LabelMask(v[0].astype(np.int64))
    if format == "png8":
        v = _read_8bit(path)
        return mask_from_8bit(v.max(axis=0))
    raise ValueError(f"unknown mask format {format!r}")


def mask_from_8bit(gray: np.ndarray) -> LabelMask:
    """Binary ground truth image (0 / nonzero) to a LabelMask."""
    return LabelMask((np.asarray(gray) > 127).astype(np.uint8))


def save_mask(path: str | os.PathLike, m: LabelMask) -> None:
    write_bras(path, m.labels[None].astype(np.float32))


def save_map_png(path: str | os.PathLike, labels: np.ndarray) -> None:
    """Black/white visualization of a change map; undefined (255) drawn gray."""
    lab = np.asarray(labels)
    img = np.where(lab == UNDEFINED, 128, np.where(lab == CHANGED, 255, 0)).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


# ------------------------------------------------------------------- transforms


def normalize(r: Raster) -> Raster:
    """Per-band standardization to zero mean and unit population std.

    A band with zero variance maps to all zeros.
    """
    v = r.values
    mean = v.mean(axis=(1, 2), keepdims=True)
    centered = v - mean
    std = np.sqrt((centered**2).mean(axis=(1, 2), keepdims=True))
    out = np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)
    return Raster(out)


def normalize_pair(pair: RasterPair) -> RasterPair:
    return RasterPair(normalize(pair.t1), normalize(pair.t2))


def crop(r: Raster, row0: int, col0: int, h: int, w: int) -> Raster:
    if row0 < 0 or col0 < 0 or h < 1 or w < 1 or row0 + h > r.height or col0 + w > r.width:
        raise ValueError(
            f"crop window rows {row0}:{row0 + h}, cols {col0}:{col0 + w} outside {r.height}x{r.width}"
        )
    return Raster(r.values[:, row0 : row0 + h, col0 : col0 + w])


def crop_mask(m: LabelMask, row0: int, col0: int, h: int, w: int) -> LabelMask:
    if row0 < 0 or col0 < 0 or h < 1 or w < 1 or row0 + h > m.height or col0 + w > m.width:
        raise ValueError("crop window out of bounds")
    return LabelMask(m.labels[row0 : row0 + h, col0 : col0 + w])


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the dihedral group acting on the last two axes.

    ``k % 4`` counter-clockwise quarter turns, preceded by a horizontal flip
    when ``k >= 4``.
    """
    if k >= 4:
        a = a[..., ::-1]
    return np.rot90(a, k % 4, axes=(-2, -1))


def augment_dihedral(pair: RasterPair, mask: LabelMask) -> list[tuple[RasterPair, LabelMask]]:
    """All 8 flip/rotation variants, applied identically to both dates and the mask."""
    check_aligned(pair, mask)
    out = []
    for k in range(8):
        out.append(
            (
                RasterPair(Raster(dihedral(pair.t1.values, k)), Raster(dihedral(pair.t2.values, k))),
                LabelMask(dihedral(mask.labels, k)),
            )
        )
    return out
