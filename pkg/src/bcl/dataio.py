"""Image dataset I/O, long-tailed subsampling, class partitions and batching.

Binary record layout (CIFAR-binary compatible for 32x32): one label byte, then
H*W*3 bytes channel-planar (red plane, green plane, blue plane), rows in raster
order. Geometry is supplied by the caller, never read from the file.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MANY, MEDIUM, FEW = "Many", "Medium", "Few"
GROUPS = (MANY, MEDIUM, FEW)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    height: int = 32
    width: int = 32
    num_classes: int = 10

    @property
    def record_bytes(self) -> int:
        return 1 + self.height * self.width * 3


@dataclass
class LtDataset:
    """Images keyed by stable ``sample_ids``.

    ``images`` is (N, H, W, 3) uint8. Labels are only consulted to build
    splits and for evaluation; nothing in pretraining reads them.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    imbalance_factor: float = 1.0
    partition_map: Dict[int, str] = field(default_factory=dict)
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3 or self.images.dtype != np.uint8:
            raise DatasetError(f"images must be (N, H, W, 3) uint8, got {self.images.shape} {self.images.dtype}")
        if len(self.labels) != len(self.images):
            raise DatasetError("labels and images differ in length")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(len(self.images))

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.images.shape[1], self.images.shape[2], self.num_classes)

    def subset(self, idx: np.ndarray) -> "LtDataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.source_index is None else self.source_index[idx]
        return LtDataset(self.images[idx], self.labels[idx], self.num_classes,
                         self.imbalance_factor, dict(self.partition_map), src)


# -- binary format ---------------------------------------------------------

def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    n = len(images)
    planar = images.transpose(0, 3, 1, 2).reshape(n, -1)
    out = np.empty((n, 1 + planar.shape[1]), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = planar
    return out.tobytes()


def save_dataset(path, ds: LtDataset) -> None:
    if ds.num_classes > 256:
        raise DatasetError("label byte holds at most 256 classes")
    Path(path).write_bytes(encode_records(ds.images, ds.labels))


def load_dataset(path, geometry: Geometry) -> LtDataset:
    raw = np.fromfile(path, dtype=np.uint8)
    stride = geometry.record_bytes
    if raw.size == 0 or raw.size % stride:
        raise DatasetError(
            f"{path}: truncated ({raw.size} bytes is not a positive multiple of record size {stride})")
    recs = raw.reshape(-1, stride)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() >= geometry.num_classes:
        raise DatasetError(f"{path}: label {labels.max()} >= class count {geometry.num_classes}")
    images = recs[:, 1:].reshape(-1, 3, geometry.height, geometry.width).transpose(0, 2, 3, 1)
    return LtDataset(np.ascontiguousarray(images), labels, geometry.num_classes)


# -- long-tailed construction ----------------------------------------------

def long_tailed_counts(n_max: int, num_classes: int, imbalance_factor: float) -> List[int]:
    """n_c = round(n_max * IF^(-c/(C-1))), round half up."""
    if imbalance_factor < 1:
        raise DatasetError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    if num_classes == 1:
        return [n_max]
    counts = [int(math.floor(n_max * imbalance_factor ** (-c / (num_classes - 1)) + 0.5))
              for c in range(num_classes)]
    if min(counts) < 1:
        raise DatasetError(f"imbalance factor {imbalance_factor} leaves a class with 0 samples")
    return counts


def make_long_tailed(ds: LtDataset, imbalance_factor: float, seed: int,
                     n_max: Optional[int] = None) -> LtDataset:
    """Subsample class c (in label order) to its exponential-profile count.

    Kept samples are chosen uniformly without replacement and retain their
    original relative order, so sample ids are assigned in source order.
    """
    counts_in = ds.class_counts
    if n_max is None:
        if len(set(counts_in.tolist())) != 1:
            raise DatasetError(f"input is not balanced: per-class counts {counts_in.tolist()}")
        n_max = int(counts_in[0])
    if n_max > counts_in.min():
        raise DatasetError(f"n_max={n_max} exceeds smallest class size {counts_in.min()}")
    target = long_tailed_counts(n_max, ds.num_classes, imbalance_factor)
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        pool = np.flatnonzero(ds.labels == c)
        keep.append(rng.choice(pool, size=target[c], replace=False))
    idx = np.sort(np.concatenate(keep))
    out = ds.subset(idx)
    out.imbalance_factor = float(imbalance_factor)
    return out


def partition_classes(ds_or_counts, scheme: str = "rank") -> Dict[int, str]:
    """Assign every class to Many / Medium / Few from training-set class counts.

    ``cifar-lt``: 34/33/33 classes by count rank (C must be 100).
    ``rank``: the same rule for any C - the last two thirds get floor(C/3)
    classes each, Many takes the remainder.
    ``threshold``: Many > 100 samples, Medium 20..100, Few < 20.
    """
    counts = ds_or_counts.class_counts if isinstance(ds_or_counts, LtDataset) else np.asarray(ds_or_counts)
    c = len(counts)
    if scheme == "threshold":
        return {k: (MANY if n > 100 else MEDIUM if n >= 20 else FEW) for k, n in enumerate(counts.tolist())}
    if scheme == "cifar-lt" and c != 100:
        raise DatasetError(f"cifar-lt partition needs 100 classes, got {c}")
    if scheme not in ("cifar-lt", "rank"):
        raise DatasetError(f"unknown partition scheme {scheme!r}")
    order = sorted(range(c), key=lambda k: (-counts[k], k))
    third = c // 3
    n_many = c - 2 * third
    out = {}
    for rank, k in enumerate(order):
        out[k] = MANY if rank < n_many else MEDIUM if rank < n_many + third else FEW
    return out


def head_tail_groups(partition_map: Dict[int, str]) -> Dict[int, str]:
    """Head = Many, Tail = Medium + Few."""
    return {k: ("head" if g == MANY else "tail") for k, g in partition_map.items()}


# -- batching ---------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def batch_iter(ds: LtDataset, batch_size: int, seed: int, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (sample_ids, images) over a seeded permutation; the partial last batch is kept."""
    n = len(ds)
    if n == 0:
        raise DatasetError("empty dataset")
    if not 1 <= batch_size <= n:
        raise DatasetError(f"batch size {batch_size} must be in [1, {n}]")
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        ids = order[start:start + batch_size]
        yield ids, ds.images[ids]


# -- manifests & few-shot subsets ---------------------------------------------

def write_counts_manifest(path, ds: LtDataset, scheme: str, seed: int) -> None:
    manifest = {
        "num_records": len(ds),
        "num_classes": ds.num_classes,
        "imbalance_factor": ds.imbalance_factor,
        "seed": seed,
        "class_counts": ds.class_counts.tolist(),
        "partition_scheme": scheme,
        "partition_map": {str(k): v for k, v in sorted(ds.partition_map.items())},
        "source_index": None if ds.source_index is None else ds.source_index.tolist(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2))


def balanced_subset(labels: np.ndarray, num_classes: int, shots: Optional[int], seed: int,
                    prefer: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices of a class-balanced subset with ``shots`` per class (``None`` = full).

    ``prefer`` marks indices to draw first (e.g. samples held out of pretraining);
    the remainder tops up classes whose preferred pool is too small. Classes
    smaller than ``shots`` are capped, with a warning.
    """
    rng = np.random.default_rng([seed, 0xB41])
    per_class = np.bincount(labels, minlength=num_classes)
    if (per_class == 0).any():
        raise DatasetError(f"classes absent from pool: {np.flatnonzero(per_class == 0).tolist()}")
    want = int(per_class.min()) if shots is None else int(shots)
    if shots is not None and per_class.min() < shots:
        logger.warning("capping %d-shot probe set at class size for %d classes",
                       shots, int((per_class < shots).sum()))
    prefer_mask = np.zeros(len(labels), bool) if prefer is None else np.asarray(prefer, bool)
    chosen = []
    for c in range(num_classes):
        first = rng.permutation(np.flatnonzero((labels == c) & prefer_mask))
        rest = rng.permutation(np.flatnonzero((labels == c) & ~prefer_mask))
        chosen.append(np.concatenate([first, rest])[:min(want, per_class[c])])
    return np.sort(np.concatenate(chosen))


# -- desk-scale fixture --------------------------------------------------------

SHAPES = ("disc", "square", "triangle", "plus", "star", "ring", "bars", "diamond", "hexagon", "cross")


def _polygon(n: int, r: float, phase: float, cx: float, cy: float, inner: float = 0.0):
    pts = []
    step = 2 * math.pi / n
    for i in range(n):
        a = phase + i * step
        pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
        if inner:
            b = a + step / 2
            pts.append((cx + inner * r * math.cos(b), cy + inner * r * math.sin(b)))
    return pts


def _draw_shape(draw, kind: str, cx: float, cy: float, r: float, phase: float, fg) -> None:
    if kind == "disc":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=fg)
    elif kind == "ring":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), outline=fg, width=max(1, int(r * 0.35)))
    elif kind == "square":
        draw.polygon(_polygon(4, r * 1.2, phase + math.pi / 4, cx, cy), fill=fg)
    elif kind == "diamond":
        # elongated rhombus so it is not a rotated square
        c, s = math.cos(phase), math.sin(phase)
        pts = [(0, 1.3 * r), (0.6 * r, 0), (0, -1.3 * r), (-0.6 * r, 0)]
        draw.polygon([(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts], fill=fg)
    elif kind == "triangle":
        draw.polygon(_polygon(3, r * 1.2, phase - math.pi / 2, cx, cy), fill=fg)
    elif kind == "hexagon":
        draw.polygon(_polygon(6, r * 1.1, phase, cx, cy), fill=fg)
    elif kind == "star":
        draw.polygon(_polygon(5, r * 1.25, phase - math.pi / 2, cx, cy, inner=0.4), fill=fg)
    elif kind in ("plus", "cross"):
        w = r * 0.32
        if kind == "cross":
            phase += math.pi / 4
        c, s = math.cos(phase), math.sin(phase)
        for dx, dy in ((1, 0), (0, 1)):
            pts = [(-r * dx - w * dy, -r * dy - w * dx), (r * dx - w * dy, r * dy - w * dx),
                   (r * dx + w * dy, r * dy + w * dx), (-r * dx + w * dy, -r * dy + w * dx)]
            draw.polygon([(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts], fill=fg)
    elif kind == "bars":
        c, s = math.cos(phase), math.sin(phase)
        for off in (-0.6, 0.0, 0.6):
            pts = [(-r, off * r - 0.15 * r), (r, off * r - 0.15 * r), (r, off * r + 0.15 * r),
                   (-r, off * r + 0.15 * r)]
            draw.polygon([(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts], fill=fg)
    else:
        raise DatasetError(f"unknown shape {kind!r}")


# Grey levels shared by every class: tone says nothing about the label, and
# without hue there is no colour shortcut for telling instances apart.
PALETTE = tuple((g, g, g) for g in (15, 55, 95, 135, 175, 215, 250))


def render_shapes(labels: np.ndarray, rng: np.random.Generator, size: int = 32, supersample: int = 4,
                  noise: float = 4.0, max_tilt: float = 15.0) -> np.ndarray:
    """One image per label: a grey shape of random size, place and tilt on a grey, slightly noisy background.

    Tilts are uniform in +-max_tilt degrees around each shape's upright pose.
    """
    from PIL import Image, ImageDraw

    big = size * supersample
    out = np.empty((len(labels), size, size, 3), dtype=np.uint8)
    for row, label in enumerate(labels):
        i, j = rng.choice(len(PALETTE), 2, replace=False)
        fg, bg = PALETTE[i], PALETTE[j]
        img = Image.new("RGB", (big, big), bg)
        r = rng.uniform(0.22, 0.36) * big
        cx, cy = rng.uniform(r + 1, big - r - 1, 2)
        tilt = math.radians(rng.uniform(-max_tilt, max_tilt))
        _draw_shape(ImageDraw.Draw(img), SHAPES[int(label)], cx, cy, r, tilt, fg)
        arr = np.asarray(img.resize((size, size), Image.LANCZOS), dtype=np.float32)
        arr = arr + rng.normal(0, noise, arr.shape)
        out[row] = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return out


def make_shape_pool(n_train_per_class: int, n_test_per_class: int, seed: int,
                    size: int = 32) -> Tuple[LtDataset, LtDataset]:
    """Balanced train pool and test split of the ten procedural shape classes."""
    rng = np.random.default_rng([seed, 0x5A9E])
    pools = []
    for n in (n_train_per_class, n_test_per_class):
        labels = np.repeat(np.arange(len(SHAPES)), n)
        pools.append(LtDataset(render_shapes(labels, rng, size), labels, len(SHAPES)))
    return pools[0], pools[1]
