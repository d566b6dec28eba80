"""Class-organized grayscale image datasets.

Covers folder ingestion (one subdirectory per class), background/evaluation
splits, a procedural synthetic dataset for desk-scale runs, and batch
preprocessing. Datasets are read-only after construction and safe to share
across workers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .seeding import derive_rng

IMAGE_EXTENSIONS = {
    ".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".tif", ".ppm", ".pgm",
}

_SPLIT_STREAM = 0x5B
_SYNTH_STREAM = 0xD5


class DatasetError(Exception):
    """A dataset could not be loaded, assembled, or batched."""


class SplitError(DatasetError):
    """A background/evaluation split request cannot be satisfied."""


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image: np.ndarray  # (H, W) float32 in [0, 1], not writeable


@dataclass(frozen=True)
class ClassRecord:
    class_id: str
    samples: tuple[Sample, ...]


@dataclass(frozen=True)
class ClassDataset:
    classes: tuple[ClassRecord, ...]
    image_size: int

    def __post_init__(self) -> None:
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate class_id in dataset")
        for c in self.classes:
            if not c.samples:
                raise DatasetError(f"class '{c.class_id}' has no samples")
            sids = [s.sample_id for s in c.samples]
            if len(set(sids)) != len(sids):
                raise DatasetError(f"duplicate sample_id in class '{c.class_id}'")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> tuple[str, ...]:
        return tuple(c.class_id for c in self.classes)

    def total_samples(self) -> int:
        return sum(len(c.samples) for c in self.classes)

    def fingerprint(self) -> str:
        """Content hash over class ids, sample ids, and pixel bytes."""
        h = hashlib.sha256()
        for c in self.classes:
            h.update(c.class_id.encode())
            for s in c.samples:
                h.update(s.sample_id.encode())
                h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        return h.hexdigest()


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    out.setflags(write=False)
    return out


def load_image_folder(root_path: str | Path, image_size: int = 28) -> ClassDataset:
    """Ingest a `root/<class_name>/<sample_file>` tree.

    Images are decoded, converted to grayscale, resized to
    image_size x image_size, and scaled to [0, 1]. Class order is
    lexicographic by directory name, sample order lexicographic by filename,
    so two loads of the same tree are identical.
    """
    if image_size < 1:
        raise DatasetError(f"image_size must be positive, got {image_size}")
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")

    classes = []
    for d in class_dirs:
        files = sorted(
            (f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS),
            key=lambda f: f.name,
        )
        if not files:
            raise DatasetError(f"class '{d.name}' contains no readable images")
        samples = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("L").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                raise DatasetError(f"cannot decode image file: {f}") from exc
            samples.append(Sample(sample_id=f.name, image=_freeze(arr)))
        classes.append(ClassRecord(class_id=d.name, samples=tuple(samples)))
    return ClassDataset(classes=tuple(classes), image_size=image_size)


def export_image_folder(data: ClassDataset, root_path: str | Path) -> Path:
    """Write a dataset back out in the `root/<class>/<sample>.png` layout."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for c in data.classes:
        cdir = root / c.class_id
        cdir.mkdir(parents=True, exist_ok=True)
        for s in c.samples:
            arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
            name = s.sample_id if Path(s.sample_id).suffix.lower() in IMAGE_EXTENSIONS else f"{s.sample_id}.png"
            Image.fromarray(arr, mode="L").save(cdir / name)
    return root


@dataclass(frozen=True)
class SplitSpec:
    """How to carve a dataset into background and evaluation class sets."""

    mode: str = "ratio"  # "ratio" | "explicit"
    background_fraction: float = 0.8
    seed: int = 0
    background_classes: tuple[str, ...] = field(default_factory=tuple)
    eval_classes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.mode not in ("ratio", "explicit"):
            raise SplitError(f"unknown split mode: {self.mode!r}")
        if self.mode == "ratio" and not (0.0 < self.background_fraction < 1.0):
            raise SplitError(
                f"background_fraction must be in (0, 1), got {self.background_fraction}"
            )


def split_background_eval(
    data: ClassDataset, spec: SplitSpec
) -> tuple[ClassDataset, ClassDataset]:
    """Split classes into disjoint (background, evaluation) datasets.

    Ratio mode shuffles class indices with the split seed and rounds the
    fraction down to a whole class count (at least one class per side).
    Both sides keep the original class ordering.
    """
    n = data.num_classes
    if n < 2:
        raise SplitError(f"need at least 2 classes to split, got {n}")

    if spec.mode == "explicit":
        bg_ids = set(spec.background_classes)
        ev_ids = set(spec.eval_classes)
        all_ids = set(data.class_ids)
        if not bg_ids or not ev_ids:
            raise SplitError("explicit split requires nonempty class lists on both sides")
        if bg_ids & ev_ids:
            raise SplitError(f"explicit split lists overlap: {sorted(bg_ids & ev_ids)}")
        if bg_ids | ev_ids != all_ids:
            missing = sorted(all_ids - (bg_ids | ev_ids))
            extra = sorted((bg_ids | ev_ids) - all_ids)
            raise SplitError(
                f"explicit split must cover every class exactly once "
                f"(missing={missing}, unknown={extra})"
            )
        bg_idx = [i for i, cid in enumerate(data.class_ids) if cid in bg_ids]
        ev_idx = [i for i, cid in enumerate(data.class_ids) if cid in ev_ids]
    else:
        n_bg = max(1, int(spec.background_fraction * n))
        if n - n_bg < 1:
            raise SplitError(
                f"background_fraction {spec.background_fraction} leaves no evaluation classes"
            )
        perm = derive_rng(spec.seed, _SPLIT_STREAM).permutation(n)
        bg_idx = sorted(int(i) for i in perm[:n_bg])
        ev_idx = sorted(int(i) for i in perm[n_bg:])

    background = ClassDataset(
        classes=tuple(data.classes[i] for i in bg_idx), image_size=data.image_size
    )
    evaluation = ClassDataset(
        classes=tuple(data.classes[i] for i in ev_idx), image_size=data.image_size
    )
    return background, evaluation


def _rasterize_strokes(strokes: list[np.ndarray], image_size: int) -> np.ndarray:
    """Deposit polyline points on a canvas and blur into soft pen strokes."""
    canvas = np.zeros((image_size, image_size), dtype=np.float64)
    for verts in strokes:
        for a, b in zip(verts[:-1], verts[1:]):
            seg_len = float(np.hypot(*(b - a)))
            n_pts = max(2, int(seg_len * 3))
            ts = np.linspace(0.0, 1.0, n_pts)
            pts = a[None, :] * (1 - ts[:, None]) + b[None, :] * ts[:, None]
            for y, x in pts:
                iy, ix = int(round(y)), int(round(x))
                if 0 <= iy < image_size and 0 <= ix < image_size:
                    canvas[iy, ix] += 1.0
    canvas = gaussian_filter(canvas, sigma=0.7)
    peak = canvas.max()
    if peak > 0:
        canvas /= peak
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def synth_generate(
    n_classes: int, samples_per_class: int, image_size: int, seed: int
) -> ClassDataset:
    """Procedural stroke-glyph dataset.

    Each class owns a fixed stroke layout; samples re-draw it with small
    vertex jitter and a sub-pixel offset, so intra-class pixel distance stays
    well below inter-class distance. Bit-identical for equal arguments.
    """
    if n_classes < 1 or samples_per_class < 1 or image_size < 8:
        raise DatasetError(
            "synth_generate needs n_classes >= 1, samples_per_class >= 1, image_size >= 8"
        )
    margin = image_size * 0.15
    classes = []
    for c in range(n_classes):
        rng = derive_rng(seed, _SYNTH_STREAM, c)
        n_strokes = int(rng.integers(2, 5))
        layout = []
        for _ in range(n_strokes):
            start = rng.uniform(margin, image_size - margin, size=2)
            n_seg = int(rng.integers(2, 4))
            angle = rng.uniform(0.0, 2.0 * np.pi)
            verts = [start]
            for _ in range(n_seg):
                angle += rng.uniform(-1.2, 1.2)
                step = rng.uniform(0.18, 0.32) * image_size
                nxt = verts[-1] + step * np.array([np.sin(angle), np.cos(angle)])
                verts.append(np.clip(nxt, 1.0, image_size - 2.0))
            layout.append(np.stack(verts))
        samples = []
        for s in range(samples_per_class):
            offset = rng.uniform(-0.8, 0.8, size=2)
            jittered = [
                v + rng.normal(0.0, 0.02 * image_size, size=v.shape) + offset
                for v in layout
            ]
            img = _rasterize_strokes(jittered, image_size)
            samples.append(Sample(sample_id=f"s{s:03d}", image=_freeze(img)))
        classes.append(ClassRecord(class_id=f"synth_{c:04d}", samples=tuple(samples)))
    return ClassDataset(classes=tuple(classes), image_size=image_size)


def preprocess_batch(
    samples: Sequence[np.ndarray],
    augment: bool = False,
    rng: np.random.Generator | None = None,
    max_shift: int = 2,
) -> np.ndarray:
    """Stack images into an (N, H, W) float32 batch.

    With augment=True, applies independent integer translations of at most
    max_shift pixels per image (zero fill), drawn from rng.
    """
    if len(samples) == 0:
        raise DatasetError("cannot preprocess an empty batch")
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise DatasetError(f"batch shape mismatch: {sorted(shapes)}")
    batch = np.stack([np.asarray(s, dtype=np.float32) for s in samples])
    if not augment:
        return batch
    if rng is None:
        raise DatasetError("augment=True requires an rng")
    h, w = batch.shape[1:]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(batch.shape[0], 2))
    out = np.zeros_like(batch)
    for i, (dy, dx) in enumerate(shifts):
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[i][dst_y, dst_x] = batch[i][src_y, src_x]
    return out
