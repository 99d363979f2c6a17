"""End-to-end unsupervised (pre-classification + DSMS-CN) and supervised
(DSMS-FCN + optional CRF) change detection."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import crf as dense_crf
from .metrics import confusion, scores
from .networks import DSMSCN, DSMSFCN, DsmscnConfig, DsmsfcnConfig, build_network
from .preclassify import (
    W_C,
    W_TBC,
    W_UC,
    PreClassMap,
    PreclassificationError,
    cva_di,
    extract_patches,
    fcm,
    partition_three_way,
    select_samples,
)
from .raster import UNDEFINED, LabelMask, RasterPair, augment_dihedral, check_aligned, normalize_pair
from .tensor_nn import Adam, LossConfig, NumericalError, parameters_of, positive_weight, wbce_loss

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ unsupervised


@dataclass(frozen=True)
class UnsupervisedRunConfig:
    patch_size: int = 13
    ratio: float = 4.0  # unchanged : changed training samples
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    val_frac: float = 0.1
    patience: int = 3
    max_steps: int | None = 250
    seed: int = 0
    fcm_m: float = 2.0
    fcm_tol: float = 1e-5
    fcm_max_iter: int = 100
    network: DsmscnConfig | None = None  # bands and patch size are filled in from the data

    def __post_init__(self):
        if self.patch_size < 5 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 5, got {self.patch_size}")
        if self.ratio <= 0:
            raise ValueError("ratio must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.val_frac < 1:
            raise ValueError("val_frac must be in [0, 1)")


@dataclass
class UnsupervisedResult:
    change_map: np.ndarray  # uint8 {0, 1}
    probability: np.ndarray  # float, network output on W_TBC, 1/0 on W_C/W_UC
    preclass: PreClassMap
    report: dict
    network: DSMSCN | None = None


def _batched_predict(net, x1: np.ndarray, x2: np.ndarray, batch: int = 512) -> np.ndarray:
    out = np.empty(len(x1), dtype=np.float64)
    net.eval()
    with torch.no_grad():
        for lo in range(0, len(x1), batch):
            a = torch.from_numpy(x1[lo : lo + batch])
            b = torch.from_numpy(x2[lo : lo + batch])
            out[lo : lo + batch] = net(a, b).double().numpy()
    return out


def train_dsmscn(
    x1: np.ndarray, x2: np.ndarray, y: np.ndarray, cfg: UnsupervisedRunConfig, net_cfg: DsmscnConfig
) -> tuple[DSMSCN, dict]:
    """Train on (n, bands, w, w) float32 patch pairs with labels in {0, 1}."""
    rng = np.random.default_rng(cfg.seed)
    n = len(y)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_frac * n)) if n >= 10 else 0
    val, train = perm[:n_val], perm[n_val:]
    w_p = positive_weight(y[train])
    loss_cfg = LossConfig(w_p)
    net = build_network("dsmscn", net_cfg, seed=cfg.seed)
    net.generator = torch.Generator().manual_seed(cfg.seed + 1)
    opt = Adam(parameters_of(net), lr=cfg.lr, weight_decay=cfg.weight_decay)
    t1, t2, ty = (torch.from_numpy(a) for a in (x1, x2, y.astype(np.float32)))

    def val_loss() -> float:
        if n_val == 0:
            return float("nan")
        p = torch.from_numpy(_batched_predict(net, x1[val], x2[val]))
        return float(wbce_loss(p, ty[val].double(), loss_cfg))

    history = {"train_loss": [], "val_loss": []}
    best_state, best_val, stale, steps = None, math.inf, 0, 0
    for epoch in range(cfg.epochs):
        net.train()
        order = train[rng.permutation(len(train))]
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[lo : lo + cfg.batch_size])
            opt.zero_grad()
            loss = wbce_loss(net(t1[idx], t2[idx]), ty[idx], loss_cfg)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        history["train_loss"].append(total / max(count, 1))
        vl = val_loss()
        history["val_loss"].append(vl)
        log.info("epoch %d train %.4f val %.4f", epoch, history["train_loss"][-1], vl)
        if n_val:
            if vl < best_val - 1e-6:
                best_val, stale = vl, 0
                best_state = {k: v.clone() for k, v in net.state_dict().items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    info = {
        "w_p": w_p,
        "train_samples": int(len(train)),
        "val_samples": int(n_val),
        "train_positives": int(y[train].sum()),
        "train_negatives": int(len(train) - y[train].sum()),
        "epochs_run": len(history["train_loss"]),
        "steps": steps,
        **history,
    }
    return net, info


def run_unsupervised(pair: RasterPair, cfg: UnsupervisedRunConfig = UnsupervisedRunConfig()) -> UnsupervisedResult:
    """normalize -> CVA -> FCM -> three-way partition -> sample selection ->
    DSMS-CN training -> classify W_TBC pixels at 0.5."""
    norm = normalize_pair(pair)
    di = cva_di(norm)
    if np.unique(di).size < 3:
        raise PreclassificationError("difference image has fewer than 3 distinct values; no change to separate")
    res = fcm(di, 3, cfg.fcm_m, cfg.fcm_tol, cfg.fcm_max_iter)
    pre = partition_three_way(res, di.shape)
    rng = np.random.default_rng(cfg.seed)
    samples = select_samples(pre, cfg.patch_size, cfg.ratio, rng)

    img1 = norm.t1.values.astype(np.float32)
    img2 = norm.t2.values.astype(np.float32)
    x1 = extract_patches(img1, samples.rows, samples.cols, cfg.patch_size)
    x2 = extract_patches(img2, samples.rows, samples.cols, cfg.patch_size)
    base = cfg.network or DsmscnConfig()
    net_cfg = dataclasses.replace(base, bands=pair.bands, patch_size=cfg.patch_size)
    net, train_info = train_dsmscn(x1, x2, samples.labels, cfg, net_cfg)

    prob = (pre.labels == W_C).astype(np.float64)
    tbc_r, tbc_c = np.nonzero(pre.labels == W_TBC)
    if tbc_r.size:
        p1 = extract_patches(img1, tbc_r, tbc_c, cfg.patch_size)
        p2 = extract_patches(img2, tbc_r, tbc_c, cfg.patch_size)
        prob[tbc_r, tbc_c] = _batched_predict(net, p1, p2)
    change = np.where(pre.labels == W_C, 1, np.where(pre.labels == W_UC, 0, prob > 0.5)).astype(np.uint8)
    report = {
        "fcm_centers": [float(c) for c in np.sort(res.centers)],
        "fcm_iterations": res.iterations,
        **{f"preclass_{k}": v for k, v in pre.counts().items()},
        "samples_positive": int(samples.labels.sum()),
        "samples_negative": int(len(samples) - samples.labels.sum()),
        "patch_size": cfg.patch_size,
        "ratio": cfg.ratio,
        "tbc_classified_changed": int(change[tbc_r, tbc_c].sum()) if tbc_r.size else 0,
        "changed_pixels": int(change.sum()),
        **train_info,
    }
    return UnsupervisedResult(change, prob, pre, report, net)


# -------------------------------------------------------------------- supervised


@dataclass(frozen=True)
class SupervisedRunConfig:
    lr: float = 2e-4
    epochs: int = 30
    steps_per_epoch: int = 25
    batch_size: int = 8
    tile: int = 64
    augment: bool = True
    weight_decay: float = 1e-4
    seed: int = 0
    tile_retries: int = 10
    network: DsmsfcnConfig | None = None
    crf: dense_crf.CrfConfig | None = None
    crf_grid: dict | None = None

    def __post_init__(self):
        if self.tile < 16 or self.tile % 16:
            raise ValueError(f"tile size must be a positive multiple of 16, got {self.tile}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")


@dataclass
class TrainedModel:
    network: DSMSFCN
    config: DsmsfcnConfig
    report: dict
    crf: dense_crf.CrfConfig | None = None


def assemble_training_set(
    dataset: list[tuple[RasterPair, LabelMask]], augment: bool
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Normalized (t1, t2, labels) float arrays, x8 dihedral variants when ``augment``."""
    out = []
    for pair, mask in dataset:
        check_aligned(pair, mask)
        norm = normalize_pair(pair)
        variants = augment_dihedral(norm, mask) if augment else [(norm, mask)]
        for p, m in variants:
            out.append((p.t1.values.astype(np.float32), p.t2.values.astype(np.float32), m.labels.copy()))
    return out


def _sample_tile(rng, scene, tile: int, retries: int):
    t1, t2, lab = scene
    h, w = lab.shape
    th, tw = min(tile, h), min(tile, w)
    best = None
    for _ in range(max(1, retries)):
        r = int(rng.integers(0, h - th + 1))
        c = int(rng.integers(0, w - tw + 1))
        crop = lab[r : r + th, c : c + tw]
        best = (r, c)
        if (crop == 1).any():
            break
    r, c = best
    return t1[:, r : r + th, c : c + tw], t2[:, r : r + th, c : c + tw], lab[r : r + th, c : c + tw]


def run_supervised_train(
    dataset: list[tuple[RasterPair, LabelMask]], cfg: SupervisedRunConfig = SupervisedRunConfig()
) -> TrainedModel:
    if not dataset:
        raise ValueError("training dataset is empty")
    scenes = assemble_training_set(dataset, cfg.augment)
    bands = scenes[0][0].shape[0]
    all_labels = np.concatenate([s[2].ravel() for s in scenes])
    valid = all_labels != UNDEFINED
    if not valid.any():
        raise ValueError("all training labels are undefined")
    n_pos = int((all_labels == 1).sum())
    n_neg = int((all_labels == 0).sum())
    w_p = positive_weight(all_labels, valid)
    loss_cfg = LossConfig(w_p)

    net_cfg = dataclasses.replace(cfg.network or DsmsfcnConfig(), bands=bands)
    net = build_network("dsmsfcn", net_cfg, seed=cfg.seed)
    net.generator = torch.Generator().manual_seed(cfg.seed + 1)
    opt = Adam(parameters_of(net), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    trace = {"loss": [], "train_f1": []}
    for epoch in range(cfg.epochs):
        net.train()
        total, tp, fp, fn = 0.0, 0, 0, 0
        for _ in range(cfg.steps_per_epoch):
            picks = rng.integers(0, len(scenes), size=cfg.batch_size)
            tiles = [_sample_tile(rng, scenes[i], cfg.tile, cfg.tile_retries) for i in picks]
            a = torch.from_numpy(np.stack([t[0] for t in tiles]))
            b = torch.from_numpy(np.stack([t[1] for t in tiles]))
            lab = np.stack([t[2] for t in tiles])[:, None]
            target = torch.from_numpy((lab == 1).astype(np.float32))
            mask = torch.from_numpy(lab != UNDEFINED)
            if not mask.any():
                continue
            opt.zero_grad()
            prob = net(a, b)
            loss = wbce_loss(prob, target, loss_cfg, mask)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
            pred = prob.detach().numpy() > 0.5
            m, t = lab != UNDEFINED, lab == 1
            tp += int((pred & t & m).sum())
            fp += int((pred & ~t & m).sum())
            fn += int((~pred & t & m).sum())
        trace["loss"].append(total / cfg.steps_per_epoch)
        trace["train_f1"].append(2 * tp / max(2 * tp + fp + fn, 1))
        log.info("epoch %d loss %.4f train_f1 %.4f", epoch, trace["loss"][-1], trace["train_f1"][-1])
    net.eval()
    report = {
        "base_scenes": len(dataset),
        "training_scenes": len(scenes),
        "positive_pixels": n_pos,
        "negative_pixels": n_neg,
        "w_p": w_p,
        "epochs": cfg.epochs,
        "steps": cfg.epochs * cfg.steps_per_epoch,
        **trace,
    }
    crf_cfg = cfg.crf
    if crf_cfg is None and cfg.crf_grid is not None:
        fit_scenes = []
        for pair, mask in dataset:
            prob, _, _ = run_supervised_infer(pair, net)
            fit_scenes.append((pair, prob, mask.labels))
        fit = dense_crf.grid_search_fit(fit_scenes, cfg.crf_grid)
        crf_cfg = fit.best
        report["crf_grid_f1"] = fit.best_f1
    return TrainedModel(net, net_cfg, report, crf_cfg)


def run_supervised_infer(
    pair: RasterPair, net: DSMSFCN, crf_cfg: dense_crf.CrfConfig | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Probability map, 0.5-thresholded map, and the CRF-refined map when ``crf_cfg`` is given."""
    if pair.bands != net.cfg.bands:
        raise ValueError(f"network expects {net.cfg.bands} bands, pair has {pair.bands}")
    norm = normalize_pair(pair)
    a = torch.from_numpy(norm.t1.values.astype(np.float32))[None]
    b = torch.from_numpy(norm.t2.values.astype(np.float32))[None]
    net.eval()
    with torch.no_grad():
        prob = net(a, b)[0, 0].double().numpy()
    change = (prob > 0.5).astype(np.uint8)
    refined = None
    if crf_cfg is not None:
        refined, _ = dense_crf.refine(prob, pair, crf_cfg)
    return prob, change, refined


def evaluate_map(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    return scores(confusion(pred, truth)).as_dict()
