"""Synthetic shape datasets and on-disk layout.

A dataset directory holds one P6 image and one P5 label map per sample id
plus a manifest.txt (header line `classes=<C>`, then one id per line).
Generated scenes place 1-3 colored shapes (rectangle, disk, triangle,
cycling for higher class counts) over a dark background, with Gaussian
pixel noise and optional occlusion, class imbalance and void borders.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .pnm import read_image, read_labels, write_image, write_labels
from .rng import Rng

VOID_LABEL = 255

# Background plus shape colors; neighbors in hue are deliberately close so
# some classes stay visually confusable under pixel noise.
_BACKGROUND = (0.18, 0.18, 0.18)
_PALETTE = [
    (0.85, 0.30, 0.25),
    (0.25, 0.45, 0.85),
    (0.75, 0.52, 0.30),
    (0.30, 0.72, 0.35),
    (0.30, 0.52, 0.80),
    (0.82, 0.72, 0.30),
    (0.62, 0.32, 0.72),
    (0.38, 0.70, 0.68),
]


@dataclass
class SampleRecord:
    image: np.ndarray   # [C,H,W] float32 in [0,1]
    labels: np.ndarray  # [H,W] int64, VOID_LABEL marks unannotated pixels
    id: str


@dataclass
class DatasetManifest:
    root: Path
    ids: list[str]
    num_classes: int
    void_label: int = VOID_LABEL
    split: str | None = None


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 64
    num_classes: int = 4
    count: int = 10
    shapes_min: int = 1
    shapes_max: int = 3
    noise_std: float = 0.04
    occlusion_prob: float = 0.3
    boundary_void: float = 0.0
    rare_class_ratio: float = 1.0
    seed: int = 0

    def validate(self):
        if self.width < 4 or self.height < 4:
            raise ContractError("image extents must be at least 4x4")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.count < 1:
            raise ContractError("count must be >= 1")
        if not 1 <= self.shapes_min <= self.shapes_max <= 3:
            raise ContractError("shapes per image must satisfy 1 <= min <= max <= 3")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ContractError("occlusion_prob must be in [0,1]")
        if not 0.0 <= self.boundary_void <= 1.0:
            raise ContractError("boundary_void must be in [0,1]")
        if self.rare_class_ratio <= 0:
            raise ContractError("rare_class_ratio must be > 0")


def _class_color(c: int):
    return _PALETTE[(c - 1) % len(_PALETTE)]


def _shape_mask(kind: int, rng: Rng, h: int, w: int) -> np.ndarray:
    """Boolean mask of one shape, fully inside the frame, extent <= h/3, w/3."""
    max_h = max(min(h // 6, (h - 2) // 2), 1)
    max_w = max(min(w // 6, (w - 2) // 2), 1)
    min_h = min(max(h // 10, 1), max_h)
    min_w = min(max(w // 10, 1), max_w)
    yy, xx = np.indices((h, w))
    if kind == 0:  # rectangle, half-extents rh x rw
        rh = rng.integers(min_h, max_h + 1)
        rw = rng.integers(min_w, max_w + 1)
        cy = rng.integers(rh, h - rh)
        cx = rng.integers(rw, w - rw)
        return (np.abs(yy - cy) <= rh) & (np.abs(xx - cx) <= rw)
    if kind == 1:  # disk
        r = rng.integers(min(min_h, min_w), min(max_h, max_w) + 1)
        cy = rng.integers(r, h - r)
        cx = rng.integers(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # apex-up isoceles triangle with half-base rw and height 2*rh
    rh = rng.integers(min_h, max_h + 1)
    rw = rng.integers(min_w, max_w + 1)
    cy = rng.integers(rh, h - rh)
    cx = rng.integers(rw, w - rw)
    rel_y = (yy - (cy - rh)) / (2.0 * rh)  # 0 at apex, 1 at base
    inside_rows = (rel_y >= 0) & (rel_y <= 1)
    return inside_rows & (np.abs(xx - cx) <= rel_y * rw)


def _boundary_pixels(labels: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighborhood contains a different label."""
    edge = np.zeros(labels.shape, bool)
    edge[:-1] |= labels[:-1] != labels[1:]
    edge[1:] |= labels[1:] != labels[:-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return edge


def synthesize_sample(config: SynthConfig, index: int) -> SampleRecord:
    """Generate sample `index`; depends only on (config, index)."""
    rng = Rng.stream(config.seed, index)
    h, w = config.height, config.width
    image = np.empty((3, h, w), np.float32)
    for ch in range(3):
        image[ch] = _BACKGROUND[ch]
    labels = np.zeros((h, w), np.int64)

    shape_classes = list(range(1, config.num_classes))
    class_weights = np.ones(len(shape_classes))
    class_weights[-1] = config.rare_class_ratio

    n_shapes = rng.integers(config.shapes_min, config.shapes_max + 1)
    occupied = np.zeros((h, w), bool)
    for _ in range(n_shapes):
        cls = shape_classes[rng.choice_weighted(class_weights)]
        kind = (cls - 1) % 3
        allow_overlap = rng.uniform() < config.occlusion_prob
        mask = _shape_mask(kind, rng, h, w)
        if not allow_overlap:
            for _ in range(20):
                if not (mask & occupied).any():
                    break
                mask = _shape_mask(kind, rng, h, w)
        occupied |= mask
        color = _class_color(cls)
        for ch in range(3):
            image[ch][mask] = color[ch]
        labels[mask] = cls

    if config.boundary_void > 0:
        edge = _boundary_pixels(labels)
        drop = rng.uniform((h, w)) < config.boundary_void
        labels[edge & drop] = VOID_LABEL

    if config.noise_std > 0:
        image = np.clip(image + rng.normal((3, h, w), config.noise_std), 0.0, 1.0)
    return SampleRecord(image=image, labels=labels, id=f"img_{index:05d}")


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write `config.count` samples plus manifest.txt; seed-deterministic."""
    config.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(config.count):
        sample = synthesize_sample(config, i)
        write_image(root / f"{sample.id}.ppm", sample.image)
        write_labels(root / f"{sample.id}.pgm", sample.labels)
        ids.append(sample.id)
    manifest = DatasetManifest(root=root, ids=ids, num_classes=config.num_classes)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    with open(manifest.root / "manifest.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(f"classes={manifest.num_classes}\n")
        for sample_id in manifest.ids:
            f.write(sample_id + "\n")


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.txt"
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    if not lines or not lines[0].startswith("classes="):
        raise DataError(f"{path}: first manifest line must be classes=<C>")
    try:
        num_classes = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise DataError(f"{path}: malformed class count {lines[0]!r}") from None
    if num_classes < 2:
        raise DataError(f"{path}: class count must be >= 2")
    return DatasetManifest(root=root, ids=lines[1:], num_classes=num_classes)


class Dataset:
    """Manifest-ordered access to samples on disk."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest

    @classmethod
    def open(cls, root) -> "Dataset":
        return cls(read_manifest(root))

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def __len__(self):
        return len(self.manifest.ids)

    def load(self, i: int) -> SampleRecord:
        sample_id = self.manifest.ids[i]
        image = read_image(self.manifest.root / f"{sample_id}.ppm")
        labels = read_labels(self.manifest.root / f"{sample_id}.pgm")
        if image.shape[1:] != labels.shape:
            raise DataError(f"{sample_id}: image extents {image.shape[1:]} "
                            f"do not match labels {labels.shape}")
        return SampleRecord(image=image, labels=labels, id=sample_id)

    def __iter__(self):
        for i in range(len(self)):
            yield self.load(i)

    def load_all(self) -> list[SampleRecord]:
        return list(self)
