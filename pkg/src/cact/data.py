"""Datasets of large labelled images with coarse per-cell masks.

On disk a dataset is a directory holding ``manifest.csv`` (id, path, label,
fold, mask_path), 8-bit grayscale PNG images, whitespace-separated integer
mask grids, and ``meta.json`` with the patch size and class names.

The synthetic generator draws every motif from one shared distribution, so
a single cell never reveals the image class; the class lives only in how the
motifs are arranged across the grid.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, DatasetValidationError, GenerationError, StratificationError

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "normal", "low", "high")
BACKGROUND = 0
MANIFEST_FIELDS = ("id", "path", "label", "fold", "mask_path")


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray  # [C, H, W] float64 in [0, 1]
    label: int
    mask: np.ndarray  # [M, N] int
    fold: str = ""

    @property
    def roi_ratio(self) -> float:
        """Fraction of non-background mask cells."""
        return float(np.mean(self.mask != BACKGROUND))


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 448
    patch_size: int = 56
    background_level: float = 0.15
    noise: float = 0.05
    ring_radius: tuple[float, float] = (9.0, 15.0)
    ring_width: float = 3.0
    ring_intensity: tuple[float, float] = (0.55, 0.85)
    jitter: int = 4
    low_displacements: int = 4
    high_density: float = 0.45
    # >0 dims motifs by a factor (1 + class_contrast) per grade step, making classes patch-separable
    class_contrast: float = 0.0
    seed: int = 7

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ContractError("synthetic image size must be a multiple of the patch size")
        if self.grid < 4:
            raise ContractError(f"need at least a 4x4 grid, got {self.grid}x{self.grid}")
        reach = self.ring_radius[1] + 2 * self.ring_width + self.jitter
        if reach > self.patch_size / 2:
            raise ContractError(f"motif reach {reach} exceeds half a patch ({self.patch_size / 2})")


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------
def _lattice(grid: int, rng: np.random.Generator) -> set[tuple[int, int]]:
    pr, pc = rng.integers(0, 2, size=2)
    return {(r, c) for r in range(pr, grid, 2) for c in range(pc, grid, 2)}


def _has_neighbor(cell, occupied) -> bool:
    r, c = cell
    return any((r + dr, c + dc) in occupied for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)))


def _displaced_lattice(grid: int, n_moves: int, rng: np.random.Generator) -> set[tuple[int, int]]:
    cells = _lattice(grid, rng)
    moved: set[tuple[int, int]] = set()
    for _ in range(100 * n_moves):
        if len(moved) >= n_moves:
            break
        candidates = sorted(cells - moved)
        r, c = candidates[rng.integers(len(candidates))]
        dr, dc = ((1, 0), (-1, 0), (0, 1), (0, -1))[rng.integers(4)]
        target = (r + dr, c + dc)
        if not (0 <= target[0] < grid and 0 <= target[1] < grid) or target in cells:
            continue
        trial = (cells - {(r, c)}) | {target}
        if _has_neighbor(target, trial):
            cells = trial
            moved.add(target)
    return cells


def motif_layout(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> set[tuple[int, int]]:
    """Occupied grid cells for an image of class ``label``."""
    g = spec.grid
    if label == BACKGROUND:
        return set()
    if label == 1:
        return _lattice(g, rng)
    if label == 2:
        return _displaced_lattice(g, spec.low_displacements, rng)
    n = int(round(spec.high_density * g * g))
    flat = rng.choice(g * g, size=n, replace=False)
    return {(int(i) // g, int(i) % g) for i in flat}


def _render_motif(spec: SyntheticSpec, rng: np.random.Generator, gain: float) -> np.ndarray:
    p = spec.patch_size
    yy, xx = np.mgrid[0:p, 0:p].astype(np.float64)
    cy, cx = (p - 1) / 2 + rng.uniform(-spec.jitter, spec.jitter, size=2)
    radius = rng.uniform(*spec.ring_radius)
    amp = rng.uniform(*spec.ring_intensity) * gain
    d = np.hypot(yy - cy, xx - cx)
    ring = amp * np.exp(-(((d - radius) / spec.ring_width) ** 2))
    # a few nuclei-like dots inside the lumen
    for _ in range(rng.integers(1, 4)):
        ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0, radius * 0.5)
        dy, dx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
        ring += 0.5 * amp * np.exp(-(((yy - dy) ** 2 + (xx - dx) ** 2) / 4.0))
    return ring


def render_image(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(pixels uint8 [H,W], mask int [M,N])``."""
    g, p = spec.grid, spec.patch_size
    img = spec.background_level + spec.noise * rng.standard_normal((spec.image_size, spec.image_size))
    mask = np.zeros((g, g), dtype=np.int64)
    gain = (1.0 + spec.class_contrast) ** -(label - 1) if label != BACKGROUND else 1.0
    for r, c in sorted(motif_layout(label, spec, rng)):
        img[r * p : (r + 1) * p, c * p : (c + 1) * p] += _render_motif(spec, rng, gain)
        mask[r, c] = label
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, mask


def _interval_overlap(a: np.ndarray, b: np.ndarray) -> float:
    lo_a, hi_a = np.quantile(a, [0.1, 0.9])
    lo_b, hi_b = np.quantile(b, [0.1, 0.9])
    inter = max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
    shorter = min(hi_a - lo_a, hi_b - lo_b)
    return 1.0 if shorter <= 0 else min(1.0, inter / shorter)


def motif_overlap(stats: dict[int, np.ndarray]) -> float:
    """Smallest pairwise overlap of per-motif (mean, variance) ranges across tissue classes.

    ``stats[label]`` is an ``[n, 2]`` array of patch mean and variance.
    """
    labels = sorted(stats)
    worst = 1.0
    for i, a in enumerate(labels):
        for b in labels[i + 1 :]:
            for col in range(2):
                worst = min(worst, _interval_overlap(stats[a][:, col], stats[b][:, col]))
    return worst


def generate(root, spec: SyntheticSpec = SyntheticSpec(), splits: dict[str, int] | None = None,
             min_overlap: float = 0.8, enforce_ambiguity: bool = True) -> Path:
    """Write a synthetic dataset under ``root``.

    ``splits`` maps fold name to the image count per class (e.g. ``{"train": 15}``).
    """
    spec.validate()
    splits = splits or {"train": 15, "val": 5, "test": 5}
    if any(n < 1 for n in splits.values()):
        raise ContractError("every split needs at least one image per class")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)

    rows = []
    stats: dict[int, list] = {c: [] for c in range(1, len(CLASS_NAMES))}
    index = 0
    p = spec.patch_size
    for fold, per_class in splits.items():
        for label, name in enumerate(CLASS_NAMES):
            for i in range(per_class):
                rng = np.random.default_rng([spec.seed, index])
                index += 1
                pixels, mask = render_image(label, spec, rng)
                image_id = f"{fold}-{name}-{i:03d}"
                Image.fromarray(pixels, mode="L").save(root / "images" / f"{image_id}.png")
                write_mask(root / "masks" / f"{image_id}.txt", mask)
                rows.append({"id": image_id, "path": f"images/{image_id}.png", "label": label,
                             "fold": fold, "mask_path": f"masks/{image_id}.txt"})
                if label != BACKGROUND:
                    for r, c in zip(*np.nonzero(mask)):
                        cell = pixels[r * p : (r + 1) * p, c * p : (c + 1) * p] / 255.0
                        stats[label].append((cell.mean(), cell.var()))

    overlap = motif_overlap({k: np.asarray(v) for k, v in stats.items()})
    log.info("motif statistic overlap across tissue classes: %.3f", overlap)
    if enforce_ambiguity and overlap < min_overlap:
        raise GenerationError(
            f"tissue classes are patch-separable: motif statistic overlap {overlap:.3f} < {min_overlap}"
        )
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    meta = {"patch_size": p, "classes": list(CLASS_NAMES), "spec": asdict(spec),
            "splits": splits, "motif_overlap": round(overlap, 6)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def write_mask(path, mask: np.ndarray) -> None:
    Path(path).write_text("\n".join(" ".join(str(int(v)) for v in row) for row in mask) + "\n")


def read_mask(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[int(v) for v in row] for row in rows], dtype=np.int64)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Record:
    id: str
    path: str
    label: int
    fold: str
    mask_path: str


@dataclass
class Dataset:
    """Read-only handle over a dataset directory; pixels load on first access."""

    root: Path
    records: list[Record]
    patch_size: int
    classes: tuple[str, ...] = CLASS_NAMES
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> LabeledImage:
        rec = self.records[i]
        if rec.id not in self._cache:
            pixels = np.asarray(Image.open(self.root / rec.path).convert("L"), dtype=np.uint8)
            self._cache[rec.id] = (pixels, read_mask(self.root / rec.mask_path))
        pixels, mask = self._cache[rec.id]
        return LabeledImage(rec.id, (pixels / 255.0)[None], rec.label, mask.copy(), rec.fold)

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])

    def class_histogram(self) -> tuple[int, ...]:
        return tuple(int(n) for n in np.bincount(self.labels(), minlength=len(self.classes)))

    def subset(self, folds: Sequence[str]) -> list[LabeledImage]:
        return [self[i] for i, r in enumerate(self.records) if r.fold in folds]

    def folds(self) -> list[str]:
        return sorted({r.fold for r in self.records})


def validate(root, patch_size: int | None = None) -> list[str]:
    """Itemized problems with the dataset at ``root`` (empty when valid)."""
    root = Path(root)
    issues: list[str] = []
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    patch_size = patch_size or meta.get("patch_size")
    classes = meta.get("classes", list(CLASS_NAMES))
    manifest = root / "manifest.csv"
    if not manifest.exists():
        return [f"manifest missing: {manifest}"]
    if patch_size is None:
        issues.append("patch size unknown: no meta.json and none given")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            return [f"manifest header {reader.fieldnames} != {list(MANIFEST_FIELDS)}"]
        rows = list(reader)
    seen = set()
    for row in rows:
        rid = row["id"]
        if rid in seen:
            issues.append(f"{rid}: duplicate id")
        seen.add(rid)
        try:
            label = int(row["label"])
        except ValueError:
            issues.append(f"{rid}: label {row['label']!r} is not an integer")
            continue
        if not 0 <= label < len(classes):
            issues.append(f"{rid}: label {label} outside class set 0..{len(classes) - 1}")
        img_path, mask_path = root / row["path"], root / row["mask_path"]
        if not img_path.exists():
            issues.append(f"{rid}: image file missing ({row['path']})")
            continue
        if not mask_path.exists():
            issues.append(f"{rid}: mask file missing ({row['mask_path']})")
            continue
        try:
            mask = read_mask(mask_path)
        except ValueError:
            issues.append(f"{rid}: mask is not an integer grid")
            continue
        if mask.size and (mask.min() < 0 or mask.max() >= len(classes)):
            issues.append(f"{rid}: mask values outside class set")
        if patch_size:
            with Image.open(img_path) as im:
                w, h = im.size
            expected = (math.ceil(h / patch_size), math.ceil(w / patch_size))
            if mask.shape != expected:
                issues.append(f"{rid}: mask grid {mask.shape} != tile grid {expected} for {h}x{w} image")
    return issues


def ingest(root, patch_size: int | None = None) -> Dataset:
    root = Path(root)
    issues = validate(root, patch_size)
    if issues:
        raise DatasetValidationError(issues)
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(root / "manifest.csv", newline="") as fh:
        records = [Record(r["id"], r["path"], int(r["label"]), r["fold"], r["mask_path"])
                   for r in csv.DictReader(fh)]
    return Dataset(root, records, int(patch_size or meta["patch_size"]),
                   tuple(meta.get("classes", CLASS_NAMES)))


# ---------------------------------------------------------------------------
# patch dataset and folds
# ---------------------------------------------------------------------------
def derive_patch_dataset(images: Sequence[LabeledImage], patch_size: int, cap: int | None = None,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Crop every mask cell with its label, then balance classes up to ``cap``.

    Returns ``(patches [n, C, p, p], labels [n])`` in a seeded shuffled order.
    """
    from .local_repr import pad_to_grid  # local import keeps data free of model code

    crops, labels = [], []
    for item in images:
        padded = pad_to_grid(item.pixels, patch_size)
        M, N = item.mask.shape
        C = padded.shape[0]
        cells = padded.reshape(C, M, patch_size, N, patch_size).transpose(1, 3, 0, 2, 4)
        crops.append(cells.reshape(M * N, C, patch_size, patch_size))
        labels.append(item.mask.reshape(-1))
    if not crops:
        raise ContractError("no images to derive patches from")
    patches, labels = np.concatenate(crops), np.concatenate(labels)

    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if cap is not None and cap > idx.size:
            log.warning("class %d has only %d patches (< cap %d); taking all", cls, idx.size, cap)
        take = idx.size if cap is None else min(cap, idx.size)
        keep.append(np.sort(rng.choice(idx, size=take, replace=False)))
    order = np.concatenate(keep)
    order = order[rng.permutation(order.size)]
    return patches[order], labels[order]


def stratified_folds(labels: Sequence[int], k: int, ids: Sequence[str] | None = None) -> np.ndarray:
    """Fold index per item: items sorted by (label, id) are dealt round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise ContractError(f"need k >= 2 folds, got {k}")
    ids = list(ids) if ids is not None else [f"{i:09d}" for i in range(len(labels))]
    order = sorted(range(len(labels)), key=lambda i: (labels[i], ids[i]))
    folds = np.empty(len(labels), dtype=np.int64)
    for pos, i in enumerate(order):
        folds[i] = pos % k
    for cls in np.unique(labels):
        present = set(folds[labels == cls])
        missing = sorted(set(range(k)) - present)
        if missing:
            raise StratificationError(f"class {cls} absent from folds {missing}")
    return folds
