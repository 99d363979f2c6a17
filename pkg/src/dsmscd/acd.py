"""Ingestion of the SZTAKI AirChange benchmark (ACD) directory layout.

Expected layout::

    root/Szada/1/{im1,im2,gt}.bmp ... root/Szada/7/...
    root/Tiszadob/1/... root/Tiszadob/5/...
    root/Archieve/...        (ignored: a single pair)

Image files may carry any extension Pillow can read (bmp, png, tif).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .raster import UNDEFINED, LabelMask, Raster, RasterPair, load_mask, load_raster

DATASETS = ("Szada", "Tiszadob")
TEST_SCENES = {"Szada": "1", "Tiszadob": "3"}
TEST_CROP = (448, 784)  # rows, cols of the top-left test window
_EXTS = (".bmp", ".png", ".tif", ".tiff")


@dataclass
class AcdScene:
    name: str  # e.g. "Szada/1"
    pair: RasterPair
    mask: LabelMask
    split: str  # "train" or "test"


@dataclass
class AcdDataset:
    name: str
    scenes: list[AcdScene]

    @property
    def train(self) -> list[tuple[RasterPair, LabelMask]]:
        return [(s.pair, s.mask) for s in self.scenes if s.split == "train"]

    @property
    def test(self) -> list[tuple[RasterPair, LabelMask]]:
        return [(s.pair, s.mask) for s in self.scenes if s.split == "test"]


def _find(scene_dir: Path, stem: str) -> Path:
    for ext in _EXTS:
        for cand in (scene_dir / f"{stem}{ext}", scene_dir / f"{stem}{ext.upper()}"):
            if cand.is_file():
                return cand
    raise FileNotFoundError(f"{scene_dir}: missing {stem}.* (tried {', '.join(_EXTS)})")


def load_scene(scene_dir: str | Path) -> tuple[RasterPair, LabelMask]:
    scene_dir = Path(scene_dir)
    t1 = load_raster(_find(scene_dir, "im1"), "png8")
    t2 = load_raster(_find(scene_dir, "im2"), "png8")
    gt = load_mask(_find(scene_dir, "gt"), "png8")
    pair = RasterPair(t1, t2)
    if gt.labels.shape != (pair.height, pair.width):
        raise ValueError(f"{scene_dir}: ground truth does not match image size")
    return pair, gt


def split_test_scene(pair: RasterPair, mask: LabelMask) -> tuple[tuple[RasterPair, LabelMask], tuple[RasterPair, LabelMask]]:
    """Top-left test crop, and the full scene with the crop masked undefined for training."""
    rows, cols = TEST_CROP
    if pair.height < rows or pair.width < cols:
        raise ValueError(f"scene {pair.height}x{pair.width} is smaller than the {rows}x{cols} test crop")
    test_pair = RasterPair(
        Raster(pair.t1.values[:, :rows, :cols]), Raster(pair.t2.values[:, :rows, :cols])
    )
    test_mask = LabelMask(mask.labels[:rows, :cols])
    train_labels = mask.labels.copy()
    train_labels[:rows, :cols] = UNDEFINED
    return (test_pair, test_mask), (pair, LabelMask(train_labels))


def ingest_acd(root: str | Path) -> dict[str, AcdDataset]:
    """Szada and Tiszadob as separate datasets; the Archieve scene is skipped."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    out = {}
    for name in DATASETS:
        ds_dir = root / name
        if not ds_dir.is_dir():
            raise FileNotFoundError(f"{root}: missing dataset directory {name}/")
        scene_dirs = sorted((d for d in ds_dir.iterdir() if d.is_dir()), key=lambda d: (len(d.name), d.name))
        if not scene_dirs:
            raise FileNotFoundError(f"{ds_dir}: no scene directories")
        scenes = []
        for d in scene_dirs:
            pair, mask = load_scene(d)
            label = f"{name}/{d.name}"
            if d.name == TEST_SCENES[name]:
                (tp, tm), (rp, rm) = split_test_scene(pair, mask)
                scenes.append(AcdScene(label, tp, tm, "test"))
                scenes.append(AcdScene(label, rp, rm, "train"))
            else:
                scenes.append(AcdScene(label, pair, mask, "train"))
        if not any(s.split == "test" for s in scenes):
            raise FileNotFoundError(f"{ds_dir}: test scene {TEST_SCENES[name]}/ not found")
        out[name] = AcdDataset(name, scenes)
    return out

