"""CVA difference image, fuzzy c-means partition and training-sample selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import RasterPair

W_UC = 0
W_C = 1
W_TBC = 2


class PreclassificationError(RuntimeError):
    """Pre-classification produced no usable changed pixels."""


def cva_di(pair: RasterPair) -> np.ndarray:
    """Per-pixel Euclidean norm of the band-wise difference t2 - t1, shape (h, w)."""
    if pair.t1.bands != pair.t2.bands:
        raise ValueError("band mismatch")
    d = pair.t2.values - pair.t1.values
    return np.sqrt((d * d).sum(axis=0))


@dataclass
class FcmResult:
    memberships: np.ndarray  # (n, c), rows sum to 1
    centers: np.ndarray  # (c,)
    objective_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def fcm_memberships(x: np.ndarray, centers: np.ndarray, m: float) -> np.ndarray:
    """u_ik = 1 / sum_j (d_ik / d_ij)^(2/(m-1)); a zero distance takes full membership."""
    d = np.abs(x[:, None] - centers[None, :])
    zero = d == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        # scale by the nearest distance so tiny d cannot overflow the power
        inv = (d.min(axis=1, keepdims=True) / d) ** (2.0 / (m - 1.0))
        u = inv / inv.sum(axis=1, keepdims=True)
    hit = zero.any(axis=1)
    if hit.any():
        z = zero[hit].astype(float)
        u[hit] = z / z.sum(axis=1, keepdims=True)
    return u


def fcm_objective(x: np.ndarray, u: np.ndarray, centers: np.ndarray, m: float) -> float:
    return float(((u**m) * (x[:, None] - centers[None, :]) ** 2).sum())


def fcm(
    di: np.ndarray,
    c: int = 3,
    m: float = 2.0,
    tol: float = 1e-5,
    max_iter: int = 100,
    init_centers: np.ndarray | None = None,
) -> FcmResult:
    """Fuzzy c-means on scalar values.

    Centers start at evenly spaced percentiles (10/50/90 for c=3) unless
    ``init_centers`` is given.  Each iteration updates memberships, then
    centers, and records the objective; stops once no center moves more
    than ``tol``.
    """
    x = np.asarray(di, dtype=np.float64).ravel()
    if c < 2:
        raise ValueError("need at least two clusters")
    if m <= 1:
        raise ValueError("fuzzifier m must exceed 1")
    if np.unique(x).size < c:
        raise ValueError(f"need at least {c} distinct values for {c} clusters")
    if init_centers is None:
        q = np.linspace(10, 90, c)
        centers = np.percentile(x, q)
        if np.unique(centers).size < c:
            centers = np.quantile(np.unique(x), np.linspace(0, 1, c))
    else:
        centers = np.asarray(init_centers, dtype=np.float64).copy()
    res = FcmResult(memberships=np.empty((x.size, c)), centers=centers)
    for it in range(1, max_iter + 1):
        u = fcm_memberships(x, centers, m)
        um = u**m
        new_centers = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
        res.objective_trace.append(fcm_objective(x, u, new_centers, m))
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        res.iterations = it
        if shift < tol:
            res.converged = True
            break
    res.memberships = fcm_memberships(x, centers, m)
    res.centers = centers
    return res


@dataclass
class PreClassMap:
    labels: np.ndarray  # (h, w) in {W_UC, W_C, W_TBC}
    center_ties: bool = False

    def counts(self) -> dict[str, int]:
        return {
            "changed": int((self.labels == W_C).sum()),
            "unchanged": int((self.labels == W_UC).sum()),
            "to_be_classified": int((self.labels == W_TBC).sum()),
        }


def partition_three_way(res: FcmResult, shape: tuple[int, int]) -> PreClassMap:
    """Max-membership cluster per pixel; clusters ranked by center: low->W_UC, mid->W_TBC, high->W_C."""
    if res.centers.size != 3:
        raise ValueError("three-way partition needs exactly 3 clusters")
    order = np.argsort(res.centers, kind="stable")
    ties = np.unique(res.centers).size < 3
    semantic = np.empty(3, dtype=np.uint8)
    semantic[order] = (W_UC, W_TBC, W_C)
    winner = np.argmax(res.memberships, axis=1)
    return PreClassMap(semantic[winner].reshape(shape), center_ties=bool(ties))


@dataclass
class SampleSet:
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray  # 1 = changed, 0 = unchanged
    patch_size: int

    def __len__(self) -> int:
        return self.labels.size

    @property
    def half(self) -> int:
        return self.patch_size // 2


def select_samples(pre: PreClassMap, patch_size: int, ratio: float, rng: np.random.Generator) -> SampleSet:
    """All W_C pixels as positives plus ceil(ratio * |W_C|) uniformly drawn W_UC negatives."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError("patch_size must be odd")
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    pos = np.flatnonzero(pre.labels.ravel() == W_C)
    if pos.size == 0:
        raise PreclassificationError("pre-classification found no changed (W_C) pixels")
    neg_pool = np.flatnonzero(pre.labels.ravel() == W_UC)
    n_neg = min(math.ceil(ratio * pos.size), neg_pool.size)
    neg = np.sort(rng.choice(neg_pool, size=n_neg, replace=False)) if n_neg else neg_pool[:0]
    idx = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, np.uint8), np.zeros(neg.size, np.uint8)])
    rows, cols = np.divmod(idx, pre.labels.shape[1])
    return SampleSet(rows, cols, labels, patch_size)


def extract_patches(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, bands, w, w) windows centred on the given pixels, reflect-padded at borders."""
    half = patch_size // 2
    padded = np.pad(image, ((0, 0), (half, half), (half, half)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch_size, patch_size), axis=(1, 2))
    return np.ascontiguousarray(win[:, rows, cols].transpose(1, 0, 2, 3))
