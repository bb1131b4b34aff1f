"""Datasets: CamVid-format directories of index PNGs, and a synthetic shape generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .metrics import CAMVID_CLASSES, VOID

# Colour sidecar for the eleven classes plus void.
CAMVID_COLORS = {
    "sky": (128, 128, 128), "building": (128, 0, 0), "column_pole": (192, 192, 128),
    "road": (128, 64, 128), "sidewalk": (0, 0, 192), "tree": (128, 128, 0),
    "sign": (192, 128, 128), "fence": (64, 64, 128), "car": (64, 0, 128),
    "pedestrian": (64, 64, 0), "cyclist": (0, 128, 192), "void": (0, 0, 0),
}


class DataError(Exception):
    """Malformed or missing dataset files."""


@dataclass
class Dataset:
    """Images (N, 3, H, W) float32 in [0, 1] and labels (N, H, W) int64."""

    images: np.ndarray
    labels: np.ndarray
    names: list[str] = field(default_factory=list)
    num_classes: int = 11
    void_index: Optional[int] = VOID

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 3:
            raise DataError("images must be N x 3 x H x W and labels N x H x W")
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[2:] != self.labels.shape[1:]:
            raise DataError(f"image/label shapes do not align: {self.images.shape} vs {self.labels.shape}")
        if not self.names:
            self.names = [f"{i:05d}" for i in range(len(self))]

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.names[i] for i in idx],
                       self.num_classes, self.void_index)

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for s in range(0, len(order), batch_size):
            sel = order[s : s + batch_size]
            yield self.images[sel], self.labels[sel]


# CamVid-format directories --------------------------------------------------------

def load_camvid_format(root, split: str, num_classes: Optional[int] = None,
                       void_index: Optional[int] = VOID) -> Dataset:
    """Load ``root/split/images/*.png`` (RGB) with ``root/split/labels/*.png`` (8-bit index).

    The class count and void index come from ``root/colormap.json`` when present,
    otherwise 11 classes with void 11.
    """
    side = Path(root) / "colormap.json"
    if num_classes is None:
        num_classes = 11
        if side.is_file():
            meta = json.loads(side.read_text())
            num_classes = len(meta["classes"])
            void_index = meta.get("void_index")
    base = Path(root) / split
    img_dir, lab_dir = base / "images", base / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DataError(f"expected {img_dir} and {lab_dir}")
    img_files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    lab_names = {p.name for p in lab_dir.iterdir() if p.suffix.lower() == ".png"}
    img_names = {p.name for p in img_files}
    missing = sorted(img_names ^ lab_names)
    if missing:
        raise DataError(f"unpaired files in {base}: {', '.join(missing)}")
    if not img_files:
        raise DataError(f"no images in {img_dir}")
    images, labels = [], []
    for p in img_files:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        lab_path = lab_dir / p.name
        lab_img = Image.open(lab_path)
        if lab_img.mode not in ("L", "P"):
            raise DataError(f"{lab_path}: label image must be single-channel, got mode {lab_img.mode}")
        lab = np.asarray(lab_img, dtype=np.int64)
        if lab.shape != img.shape[:2]:
            raise DataError(f"{lab_path}: label size {lab.shape} != image size {img.shape[:2]}")
        bad = (lab >= num_classes) if void_index is None else (lab >= num_classes) & (lab != void_index)
        if bad.any():
            raise DataError(f"{lab_path}: label value {int(lab[bad][0])} is neither a class nor void")
        images.append(img.transpose(2, 0, 1))
        labels.append(lab)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images in {img_dir} have differing sizes: {sorted(shapes)}")
    return Dataset(np.stack(images), np.stack(labels), [p.stem for p in img_files], num_classes, void_index)


def save_camvid_format(ds: Dataset, root, split: str, class_names: Sequence[str] = CAMVID_CLASSES) -> Path:
    """Write a dataset as index PNGs plus a ``colormap.json`` sidecar at ``root``."""
    root = Path(root)
    img_dir, lab_dir = root / split / "images", root / split / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    for name, img, lab in zip(ds.names, ds.images, ds.labels):
        rgb = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(img_dir / f"{name}.png")
        Image.fromarray(lab.astype(np.uint8), "L").save(lab_dir / f"{name}.png")
    names = list(class_names)[: ds.num_classes]
    side = {"void_index": ds.void_index,
            "classes": [{"index": i, "name": n, "color": list(CAMVID_COLORS.get(n, (0, 0, 0)))}
                        for i, n in enumerate(names)]}
    (root / "colormap.json").write_text(json.dumps(side, indent=2))
    return root


# synthetic shapes -------------------------------------------------------------------

SHAPES = ("rect", "disc", "bar")


@dataclass(frozen=True)
class SyntheticSpec:
    """Random scenes of rectangles, discs and bars on a class-0 background."""

    n: int = 200
    size: int = 64
    classes: int = 5
    shapes: tuple[str, ...] = SHAPES
    count_range: tuple[int, int] = (1, 2)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= 11:
            raise ValueError("synthetic class count must be in [2, 11]")
        if self.size < 16:
            raise ValueError(f"canvas {self.size} is too small (minimum 16)")
        if self.n < 1:
            raise ValueError("sample count must be positive")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shape families must be drawn from {SHAPES}")
        lo, hi = self.count_range
        if lo < 0 or hi < max(lo, 1):
            raise ValueError("invalid per-class count range")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def parse_synth(text: str) -> SyntheticSpec:
    """``n=200,size=64,classes=5,seed=0,noise=0.05,shapes=rect+disc,count=1-2``."""
    kw: dict = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        if "=" not in item:
            raise ValueError(f"synthetic spec item {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k in ("n", "size", "classes", "seed"):
            kw[k] = int(v)
        elif k == "noise":
            kw[k] = float(v)
        elif k == "shapes":
            kw[k] = tuple(v.split("+"))
        elif k == "count":
            lo, _, hi = v.partition("-")
            kw["count_range"] = (int(lo), int(hi or lo))
        else:
            raise ValueError(f"unknown synthetic spec key {k!r}")
    return SyntheticSpec(**kw)


def class_palette(classes: int) -> np.ndarray:
    """Well-separated base colours, one per class."""
    hues = np.arange(classes) / classes
    rgb = np.stack([0.5 + 0.4 * np.cos(2 * np.pi * (hues + o)) for o in (0.0, 1 / 3, 2 / 3)], axis=1)
    rgb[0] = (0.15, 0.15, 0.15)
    return rgb.astype(np.float32)


def _texture(cls: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    # class-specific stripe pattern, small amplitude
    ang = np.pi * cls / 7.0
    freq = 0.25 + 0.15 * (cls % 4)
    return 0.08 * np.sin(freq * (np.cos(ang) * xx + np.sin(ang) * yy))


def _shape_mask(kind: str, rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    lo, hi = max(4, size // 8), max(6, size // 2)
    if kind == "rect":
        h, w = rng.integers(lo, hi + 1, size=2)
        y0, x0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == "disc":
        r = rng.uniform(lo / 2, hi / 2)
        cy, cx = rng.uniform(r, size - r, size=2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    thick = int(rng.integers(max(2, lo // 2), lo + 1))
    off = int(rng.integers(0, size - thick + 1))
    return (yy >= off) & (yy < off + thick) if rng.random() < 0.5 else (xx >= off) & (xx < off + thick)


def render_scene(masks: Sequence[tuple[int, np.ndarray]], size: int, classes: int, noise: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Paint (class, mask) pairs in order over a class-0 background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    pal = class_palette(classes)
    label = np.zeros((size, size), np.int64)
    for cls, m in masks:
        label[m] = cls
    img = pal[label].transpose(2, 0, 1).copy()
    for cls in np.unique(label):
        sel = label == cls
        img[:, sel] += _texture(int(cls), yy[sel], xx[sel])
    if noise > 0:
        img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32), label


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic segmentation set; later shapes occlude earlier ones."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)
    images = np.empty((spec.n, 3, s, s), np.float32)
    labels = np.empty((spec.n, s, s), np.int64)
    lo, hi = spec.count_range
    for i in range(spec.n):
        while True:
            masks = []
            for cls in range(1, spec.classes):
                for _ in range(int(rng.integers(lo, hi + 1))):
                    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
                    masks.append((cls, _shape_mask(kind, rng, s, yy, xx)))
            order = rng.permutation(len(masks))
            masks = [masks[j] for j in order]
            img, lab = render_scene(masks, s, spec.classes, spec.noise, rng)
            if len(np.unique(lab)) >= 2:
                break
        images[i], labels[i] = img, lab
    return Dataset(images, labels, [f"synth{spec.seed}_{i:05d}" for i in range(spec.n)], spec.classes, None)


def synthetic_splits(spec: SyntheticSpec, n_val: int) -> tuple[Dataset, Dataset]:
    """Train set from ``spec`` and a disjoint validation set from a derived seed."""
    train = generate_synthetic(spec)
    val_seed = int(np.random.SeedSequence(spec.seed).spawn(1)[0].generate_state(1)[0])
    val = generate_synthetic(SyntheticSpec(n_val, spec.size, spec.classes, spec.shapes, spec.count_range,
                                           spec.noise, val_seed))
    return train, val
