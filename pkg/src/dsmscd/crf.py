"""Fully connected binary CRF over a change-probability map.

Energy: unary -log P plus Potts-weighted Gaussian pairwise terms

    k(i, j) = w1 * exp(-|c_i - c_j|^2 / 2 sa^2 - |d_i - d_j|^2 / 2 sb^2)
            + w2 * exp(-|c_i - c_j|^2 / 2 sg^2)

where c are pixel coordinates and d the spectral-difference feature.
Marginals come from parallel mean-field updates.  Dense message passing is
done either exactly (O(N^2), small images / testing) or through
:class:`BilateralLattice`, which keeps the spatial Gaussian exact
(separable) and approximates the spectral Gaussian on a regular grid with
cubic interpolation.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import kvdoc
from .metrics import ConfusionMatrix, confusion, scores
from .preclassify import cva_di
from .raster import RasterPair, normalize_pair

PROB_EPS = 1e-7


@dataclass(frozen=True)
class CrfConfig:
    # kernel sums are unnormalized, so strong weights or wide kernels make the
    # parallel update oscillate; these values come from a grid fit on synthetic scenes
    w1: float = 0.5
    w2: float = 1.0
    sigma_alpha: float = 3.0
    sigma_beta: float = 1.0
    sigma_gamma: float = 1.0
    iterations: int = 10
    spectral: str = "magnitude"  # "magnitude": CVA DI; "vector": per-band t2 - t1
    backend: str = "lattice"  # or "exact"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.spectral not in ("magnitude", "vector"):
            raise ValueError("spectral must be 'magnitude' or 'vector'")
        if self.backend not in ("lattice", "exact"):
            raise ValueError("backend must be 'lattice' or 'exact'")

    def to_doc(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_doc(cls, doc: dict) -> CrfConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


def save_crf_config(path, cfg: CrfConfig) -> None:
    kvdoc.dump(path, cfg.to_doc())


def load_crf_config(path) -> CrfConfig:
    return CrfConfig.from_doc(kvdoc.load(path))


DEFAULT_GRID = {
    "w1": [0.5, 1, 3, 5, 10],
    "w2": [0.5, 1, 3, 5, 10],
    "sigma_alpha": [3, 10, 30, 60],
    "sigma_beta": [1, 3, 10],
    "sigma_gamma": [1, 3],
}


# ------------------------------------------------------------------------ unary


def build_unary(prob: np.ndarray) -> np.ndarray:
    """(2, h, w) potentials: [-log(1-P), -log P] with P clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return np.stack([-np.log1p(-p), -np.log(p)])


def spectral_features(pair: RasterPair, mode: str = "magnitude") -> np.ndarray:
    """(B, h, w) spectral feature d from the standardized pair."""
    norm = normalize_pair(pair)
    if mode == "magnitude":
        return cva_di(norm)[None]
    if mode == "vector":
        return norm.t2.values - norm.t1.values
    raise ValueError(f"unknown spectral mode {mode!r}")


# -------------------------------------------------------------------- filtering


def _gauss_taps(sigma: float, length: int) -> np.ndarray:
    radius = int(min(length - 1, np.ceil(8.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-0.5 * (x / sigma) ** 2)


def spatial_filter(values: np.ndarray, sigma: float, exclude_self: bool = True) -> np.ndarray:
    """sum_{j != i} exp(-|c_i - c_j|^2 / 2 sigma^2) v_j over the pixel grid, exactly (separable)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape[-2:]
    out = correlate1d(v, _gauss_taps(sigma, h), axis=-2, mode="constant")
    out = correlate1d(out, _gauss_taps(sigma, w), axis=-1, mode="constant")
    return out - v if exclude_self else out


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Weights for grid offsets -1, 0, 1, 2 at fractional position t."""
    t2, t3 = t * t, t * t * t
    return np.stack(
        [(-t3 + 2 * t2 - t) / 2, (3 * t3 - 5 * t2 + 2) / 2, (-3 * t3 + 4 * t2 + t) / 2, (t3 - t2) / 2], axis=-1
    )


class BilateralLattice:
    """Approximate bilateral Gauss transform on an image.

    The spectral axes (guide / sigma_guide) are discretized on a regular
    grid of the given ``spacing``.  For every grid node r the plane
    exp(-|r - g_j|^2/2) v_j is blurred exactly in space; each pixel then
    reads its value by tensor-product cubic interpolation over the 4^B
    surrounding nodes.  Construction is value-independent so one lattice
    serves all mean-field iterations.
    """

    def __init__(
        self, guide: np.ndarray, sigma_xy: float, sigma_guide: float | np.ndarray, spacing: float = 0.5, chunk: int = 64
    ):
        guide = np.asarray(guide, dtype=np.float64)
        if guide.ndim == 2:
            guide = guide[None]
        sg = np.broadcast_to(np.asarray(sigma_guide, dtype=np.float64), (guide.shape[0],))
        if sigma_xy <= 0 or np.any(sg <= 0):
            raise ValueError("bandwidths must be positive")
        if guide.shape[0] + 2 > 8:
            raise ValueError("feature dimension (2 spatial + guide bands) must be <= 8")
        self.bands, self.h, self.w = guide.shape
        self.sigma_xy = float(sigma_xy)
        self.chunk = chunk
        n = self.h * self.w
        g = (guide.reshape(self.bands, n) / sg[:, None]).T  # (N, B) in bandwidth units
        self.g = g
        pos = g / spacing
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        offsets = np.array(list(itertools.product(range(-1, 3), repeat=self.bands)), dtype=np.int64)
        wdim = _catmull_rom(frac)  # (N, B, 4)
        weights = np.ones((n, len(offsets)))
        for b in range(self.bands):
            weights *= wdim[:, b, offsets[:, b] + 1]
        corners = (base[:, None, :] + offsets[None]).reshape(-1, self.bands)
        nodes, inv = np.unique(corners, axis=0, return_inverse=True)
        self.nodes = nodes * spacing
        inv = inv.reshape(-1)
        order = np.argsort(inv, kind="stable")
        self._node_of = inv[order]
        self._pixel_of = np.repeat(np.arange(n), len(offsets))[order]
        self._weight_of = weights.reshape(-1)[order]
        self._starts = np.searchsorted(self._node_of, np.arange(len(nodes) + 1))
        # interpolated self weight, exp(0) = 1 up to interpolation error
        self.self_weight = np.zeros(n)
        for lo in range(0, len(nodes), chunk):
            G = self._node_kernel(lo, min(lo + chunk, len(nodes)))
            a, b = self._starts[lo], self._starts[min(lo + chunk, len(nodes))]
            np.add.at(
                self.self_weight,
                self._pixel_of[a:b],
                self._weight_of[a:b] * G[self._node_of[a:b] - lo, self._pixel_of[a:b]],
            )

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def _node_kernel(self, lo: int, hi: int) -> np.ndarray:
        d = self.nodes[lo:hi, None, :] - self.g[None]
        return np.exp(-0.5 * (d * d).sum(-1))

    def __call__(self, values: np.ndarray, exclude_self: bool = True) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        squeeze = v.ndim == 2
        if squeeze:
            v = v[None]
        c = v.shape[0]
        flat = v.reshape(c, -1)
        out = np.zeros_like(flat)
        taps_h, taps_w = _gauss_taps(self.sigma_xy, self.h), _gauss_taps(self.sigma_xy, self.w)
        for lo in range(0, self.num_nodes, self.chunk):
            hi = min(lo + self.chunk, self.num_nodes)
            G = self._node_kernel(lo, hi)  # (k, N)
            planes = (G[:, None, :] * flat[None]).reshape(-1, self.h, self.w)
            planes = correlate1d(planes, taps_h, axis=1, mode="constant")
            planes = correlate1d(planes, taps_w, axis=2, mode="constant")
            J = planes.reshape(hi - lo, c, -1)
            a, b = self._starts[lo], self._starts[hi]
            node, pix, wt = self._node_of[a:b] - lo, self._pixel_of[a:b], self._weight_of[a:b]
            for ch in range(c):
                out[ch] += np.bincount(pix, weights=wt * J[node, ch, pix], minlength=out.shape[1])
        if exclude_self:
            out -= self.self_weight[None] * flat
        out = out.reshape(v.shape)
        return out[0] if squeeze else out


def gaussian_filter(
    values: np.ndarray,
    sigma_xy: float,
    guide: np.ndarray | None = None,
    sigma_guide: float | np.ndarray | None = None,
    spacing: float = 0.5,
) -> np.ndarray:
    """sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j with f = (row/sxy, col/sxy, guide/sguide).

    ``values`` is (h, w) or (C, h, w); ``guide`` is (h, w) or (B, h, w).
    Without a guide the spatial sum is computed exactly.
    """
    if guide is None:
        return spatial_filter(values, sigma_xy)
    if sigma_guide is None or np.any(np.asarray(sigma_guide) <= 0):
        raise ValueError("sigma_guide must be positive")
    return BilateralLattice(guide, sigma_xy, sigma_guide, spacing)(values)


def exact_gaussian_sum(values: np.ndarray, features: np.ndarray, block: int = 2048) -> np.ndarray:
    """Reference O(N^2) sum_{j != i} exp(-|f_i - f_j|^2/2) v_j for (N, D) features, values (N,) or (N, C)."""
    f = np.asarray(features, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(v)
    for lo in range(0, len(f), block):
        d = f[lo : lo + block, None, :] - f[None]
        K = np.exp(-0.5 * (d * d).sum(-1))
        out[lo : lo + block] = K @ v
    return out - v


def pixel_features(h: int, w: int, sigma_xy: float, guide: np.ndarray | None = None, sigma_guide=None) -> np.ndarray:
    rr, cc = np.mgrid[:h, :w]
    cols = [rr.reshape(-1, 1) / sigma_xy, cc.reshape(-1, 1) / sigma_xy]
    if guide is not None:
        guide = np.asarray(guide, dtype=np.float64)
        if guide.ndim == 2:
            guide = guide[None]
        sg = np.broadcast_to(np.asarray(sigma_guide, dtype=np.float64), (guide.shape[0],))
        cols.append((guide.reshape(guide.shape[0], -1) / sg[:, None]).T)
    return np.concatenate(cols, axis=1)


# ------------------------------------------------------------------- mean field


@dataclass
class MarginalField:
    q: np.ndarray  # (2, h, w): Q(unchanged), Q(changed)
    max_change: list[float] = field(default_factory=list)

    @property
    def changed(self) -> np.ndarray:
        return self.q[1]


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    e = -energy
    e = e - e.max(axis=0, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=0, keepdims=True)


class _Kernels:
    """Pairwise message operator for one (image, features, config)."""

    def __init__(self, spectral: np.ndarray, cfg: CrfConfig, bilateral: BilateralLattice | None = None):
        self.cfg = cfg
        b, h, w = spectral.shape
        self.shape = (h, w)
        if cfg.backend == "exact":
            self.fb = pixel_features(h, w, cfg.sigma_alpha, spectral, cfg.sigma_beta)
            self.fs = pixel_features(h, w, cfg.sigma_gamma)
        elif cfg.w1 > 0:
            self.lattice = bilateral or BilateralLattice(spectral, cfg.sigma_alpha, cfg.sigma_beta)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        """Sum over kernels of w_m * (K_m Q)(l) for each label l, shape (2, h, w)."""
        cfg = self.cfg
        h, w = self.shape
        out = np.zeros_like(q)
        if cfg.backend == "exact":
            flat = q.reshape(2, -1).T
            if cfg.w1 > 0:
                out += cfg.w1 * exact_gaussian_sum(flat, self.fb).T.reshape(2, h, w)
            if cfg.w2 > 0:
                out += cfg.w2 * exact_gaussian_sum(flat, self.fs).T.reshape(2, h, w)
            return out
        if cfg.w1 > 0:
            out += cfg.w1 * self.lattice(q)
        if cfg.w2 > 0:
            out += cfg.w2 * spatial_filter(q, cfg.sigma_gamma)
        return out


def mean_field_infer(
    unary: np.ndarray,
    spectral: np.ndarray,
    cfg: CrfConfig,
    iterations: int | None = None,
    bilateral: BilateralLattice | None = None,
) -> MarginalField:
    """Parallel mean-field with Potts compatibility.

    Q starts as softmax(-unary); each round sets
    Q_i(l) ∝ exp(-unary_i(l) - sum_m w_m (K_m Q(1-l))_i).
    """
    unary = np.asarray(unary, dtype=np.float64)
    spectral = np.asarray(spectral, dtype=np.float64)
    if spectral.ndim == 2:
        spectral = spectral[None]
    if unary.shape[0] != 2 or unary.shape[1:] != spectral.shape[1:]:
        raise ValueError(f"unary {unary.shape} and features {spectral.shape} are inconsistent")
    q = _softmax_neg(unary)
    res = MarginalField(q)
    if cfg.w1 == 0 and cfg.w2 == 0:
        return res
    kernels = _Kernels(spectral, cfg, bilateral)
    for _ in range(iterations or cfg.iterations):
        m = kernels(q)
        # Potts: label l pays for the mass filtered from the other label
        new = _softmax_neg(unary + m[::-1])
        res.max_change.append(float(np.abs(new - q).max()))
        q = new
    res.q = q
    return res


def refine(
    prob: np.ndarray, pair: RasterPair, cfg: CrfConfig, bilateral: BilateralLattice | None = None
) -> tuple[np.ndarray, MarginalField]:
    """CRF-refined binary change map (uint8) and its marginals."""
    prob = np.asarray(prob)
    if prob.shape != (pair.height, pair.width):
        raise ValueError(f"probability map {prob.shape} does not match pair {pair.height}x{pair.width}")
    marg = mean_field_infer(build_unary(prob), spectral_features(pair, cfg.spectral), cfg, bilateral=bilateral)
    return (marg.changed > 0.5).astype(np.uint8), marg


# ------------------------------------------------------------------ grid search


@dataclass
class GridSearchResult:
    best: CrfConfig
    best_f1: float
    table: list[tuple[CrfConfig, float]]


def grid_search_fit(
    scenes: list[tuple[RasterPair, np.ndarray, np.ndarray]],
    grid: dict[str, list[float]] | None = None,
    base: CrfConfig = CrfConfig(),
) -> GridSearchResult:
    """Exhaustive search over the Cartesian grid, scoring pooled F1 on ``(pair, prob, truth)`` scenes.

    Ties go to the smaller (w1, w2), then to grid order.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    grid = {**DEFAULT_GRID, **(grid or {})}
    keys = ("w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma")
    axes = [list(grid[k]) for k in keys]
    if any(len(a) == 0 for a in axes):
        raise ValueError("grid has an empty axis")
    prepared = [(pair, np.asarray(prob), np.asarray(truth), spectral_features(pair, base.spectral)) for pair, prob, truth in scenes]
    lattices: dict[tuple[int, float, float], BilateralLattice] = {}
    table = []
    best, best_key = None, None
    for combo in itertools.product(*axes):
        cfg = dataclasses.replace(base, **dict(zip(keys, (float(c) for c in combo))))
        total = ConfusionMatrix(0, 0, 0, 0)
        for s, (pair, prob, truth, spec) in enumerate(prepared):
            lat = None
            if cfg.backend == "lattice" and cfg.w1 > 0:
                key = (s, cfg.sigma_alpha, cfg.sigma_beta)
                if key not in lattices:
                    lattices[key] = BilateralLattice(spec, cfg.sigma_alpha, cfg.sigma_beta)
                lat = lattices[key]
            marg = mean_field_infer(build_unary(prob), spec, cfg, bilateral=lat)
            cm = confusion((marg.changed > 0.5).astype(np.uint8), truth)
            total = ConfusionMatrix(total.tp + cm.tp, total.fp + cm.fp, total.tn + cm.tn, total.fn + cm.fn)
        f1 = scores(total).f1
        table.append((cfg, f1))
        rank = (-f1, cfg.w1, cfg.w2)
        if best_key is None or rank < best_key:
            best, best_key = cfg, rank
    return GridSearchResult(best, -best_key[0], table)
