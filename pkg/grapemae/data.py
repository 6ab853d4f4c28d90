"""
Dataset ingestion, class-capped splitting, square slicing, low-data subsets
and a synthetic grating corpus for desk-scale runs.

Directory layout: root/<class_name>/<image files>. Split manifests are CSV
files with columns (path, class_id, split).
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from logzero import logger
from PIL import Image, UnidentifiedImageError

from .augment import resize_bilinear
from .errors import ConfigurationError, DecodeError, SplitError

IMAGE_SUFFIXES = (".png", ".ppm")
SPLITS = ("train", "val", "test")
PathLike = Union[str, Path]


# -----------------------------
# Image I/O
# -----------------------------
def load_image(path: PathLike) -> np.ndarray:
    """Decode a PNG or binary PPM into an H×W×3 float64 array in [0, 1]."""
    p = Path(path)
    if p.suffix.lower() not in IMAGE_SUFFIXES:
        raise DecodeError(f"unsupported image format {p.suffix!r}: {p}", path=str(p))
    try:
        with Image.open(p) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise DecodeError(f"cannot decode {p}: {e}", path=str(p)) from e
    return rgb / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: PathLike, image: np.ndarray) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(p)
    return p


def save_gray(path: PathLike, values: np.ndarray) -> Path:
    """8-bit grayscale image (PNG or PGM by suffix) from values in [0, 1]."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(values), mode="L").save(p)
    return p


# -----------------------------
# Datasets
# -----------------------------
@dataclass(frozen=True)
class LabeledItem:
    path: str
    class_id: int
    group: Optional[str] = None


@dataclass
class LabeledDataset:
    items: List[LabeledItem]
    class_names: List[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def by_class(self) -> Dict[int, List[LabeledItem]]:
        out: Dict[int, List[LabeledItem]] = {c: [] for c in range(self.num_classes)}
        for item in self.items:
            out[item.class_id].append(item)
        return out


def list_images(root: PathLike) -> List[Path]:
    return sorted(p for p in Path(root).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_directory(root: PathLike, group_from: Optional[str] = None) -> LabeledDataset:
    """
    Build a dataset from root/<class_name>/<images>; class ids follow sorted class names.

    With `group_from="prefix"`, the file-name part before the first underscore is
    the grouping key (e.g. a capture date) used to keep groups within one split.
    """
    root = Path(root)
    if not root.is_dir():
        raise DecodeError(f"dataset directory not found: {root}", path=str(root))
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    items = []
    for cid, d in enumerate(class_dirs):
        for p in list_images(d):
            group = p.stem.split("_")[0] if group_from == "prefix" else None
            items.append(LabeledItem(str(p), cid, group))
    logger.info(f"[data] {root}: {len(items)} images in {len(class_dirs)} classes")
    return LabeledDataset(items, [d.name for d in class_dirs])


# -----------------------------
# Splitting
# -----------------------------
@dataclass
class SplitSpec:
    assignments: Dict[str, str] = field(default_factory=dict)
    items: List[LabeledItem] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)

    def subset(self, split: str) -> List[LabeledItem]:
        return [it for it in self.items if self.assignments[it.path] == split]

    def counts(self) -> Dict[str, Dict[int, int]]:
        out = {s: {c: 0 for c in range(len(self.class_names))} for s in SPLITS}
        for it in self.items:
            out[self.assignments[it.path]][it.class_id] += 1
        return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _units(items: Sequence[LabeledItem], rng: np.random.Generator) -> List[List[LabeledItem]]:
    """Shuffled assignment units: whole groups when items carry a group key, single items otherwise."""
    groups: Dict[str, List[LabeledItem]] = {}
    units: List[List[LabeledItem]] = []
    for it in items:
        if it.group is None:
            units.append([it])
        else:
            groups.setdefault(it.group, []).append(it)
    units.extend(groups[k] for k in sorted(groups))
    order = rng.permutation(len(units))
    return [units[i] for i in order]


def split_capped(
    dataset: LabeledDataset,
    cap_factor: float = 4.0,
    seed: int = 0,
    train_ratio: float = 0.84,
    test_fraction: float = 0.2,
) -> SplitSpec:
    """
    Class-capped train/val/test split.

    Each class first reserves round(test_fraction·n) items (at least 1) for test;
    the rest is its train+val pool. Pools are capped at cap_factor times the
    smallest pool and the excess goes to test. Within the capped pool, val takes
    round((1 - train_ratio)·pool) items (at least 1) and train the remainder.
    Items carrying a group key move as whole groups, so test and val may
    overshoot their quotas by part of a group.
    """
    if cap_factor < 1:
        raise ConfigurationError(f"cap factor must be at least 1, got {cap_factor}")
    per_class = dataset.by_class()
    for cid, items in per_class.items():
        if len(items) < 3:
            name = dataset.class_names[cid]
            raise SplitError(f"class {name!r} has {len(items)} items; at least 3 are needed", class_name=name)

    rng = np.random.default_rng(seed)
    tests: Dict[int, List[LabeledItem]] = {}
    pool_units: Dict[int, List[List[LabeledItem]]] = {}
    for cid, items in per_class.items():
        test_base = max(1, _round_half_up(test_fraction * len(items)))
        units, test = _units(items, rng), []
        while units and len(test) < test_base:
            test.extend(units.pop(0))
        tests[cid], pool_units[cid] = test, units

    # the cap follows the pools actually left; trimming can shrink the smallest pool, so repeat
    while True:
        pools = {cid: sum(len(u) for u in units) for cid, units in pool_units.items()}
        cap = int(cap_factor * min(pools.values()))
        if all(n <= cap for n in pools.values()):
            break
        for cid, units in pool_units.items():
            kept, size = [], 0
            for unit in units:
                if size + len(unit) <= cap:
                    kept.append(unit)
                    size += len(unit)
                else:
                    tests[cid].extend(unit)
            if size < pools[cid]:
                logger.debug(f"[split] class {dataset.class_names[cid]}: {pools[cid] - size} excess items to test")
            pool_units[cid] = kept

    assignments: Dict[str, str] = {}
    for cid, units in pool_units.items():
        if len(units) < 2:
            name = dataset.class_names[cid]
            raise SplitError(
                f"class {name!r} keeps {len(units)} train+val groups after test selection; at least 2 are needed",
                class_name=name,
            )
        n_val = max(1, _round_half_up((1.0 - train_ratio) * pools[cid]))
        n_in_val = 0
        for k, unit in enumerate(units):
            # the last unit always trains
            tag = "val" if n_in_val < n_val and k < len(units) - 1 else "train"
            if tag == "val":
                n_in_val += len(unit)
            for it in unit:
                assignments[it.path] = tag
        for it in tests[cid]:
            assignments[it.path] = "test"
    return SplitSpec(assignments, list(dataset.items), list(dataset.class_names))


def write_manifest(split: SplitSpec, path: PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(it.path, it.class_id, split.assignments[it.path]) for it in split.items],
        columns=["path", "class_id", "split"],
    )
    frame.to_csv(p, index=False)
    return p


def read_manifest(path: PathLike) -> SplitSpec:
    p = Path(path)
    if not p.exists():
        raise DecodeError(f"split manifest not found: {p}", path=str(p))
    frame = pd.read_csv(p, dtype={"path": str, "class_id": int, "split": str})
    items = [LabeledItem(row.path, int(row.class_id)) for row in frame.itertuples(index=False)]
    assignments = {row.path: row.split for row in frame.itertuples(index=False)}
    names: Dict[int, str] = {}
    for it in items:
        names.setdefault(it.class_id, Path(it.path).parent.name)
    num_classes = max(names) + 1 if names else 0
    class_names = [names.get(c, f"class_{c}") for c in range(num_classes)]
    return SplitSpec(assignments, items, class_names)


# -----------------------------
# Low-data subsets
# -----------------------------
def subset_fraction(items: Sequence[LabeledItem], fraction: float, seed: int = 0) -> List[LabeledItem]:
    """Per-class stratified sample of ceil(fraction·n_c) items, in original order."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"label fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[int]] = {}
    for i, it in enumerate(items):
        by_class.setdefault(it.class_id, []).append(i)
    keep = set()
    for cid in sorted(by_class):
        idx = by_class[cid]
        k = math.ceil(fraction * len(idx) - 1e-9)
        keep.update(np.asarray(idx)[rng.permutation(len(idx))[:k]].tolist())
    return [it for i, it in enumerate(items) if i in keep]


# -----------------------------
# Square slicing
# -----------------------------
@dataclass(frozen=True)
class SliceSpec:
    side: int
    max_overlap: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.max_overlap <= 0.10:
            raise ConfigurationError(f"max_overlap must be in [0, 0.10], got {self.max_overlap}")

    @property
    def min_stride(self) -> float:
        return self.side * (1.0 - self.max_overlap)


@dataclass
class SliceResult:
    slices: List[np.ndarray]
    offsets: List[Tuple[int, int]]
    warning: bool = False


def _axis_offsets(length: int, spec: SliceSpec) -> Tuple[List[int], bool]:
    side = spec.side
    if length == side:
        return [0], False
    k = math.ceil((length - side) / side) + 1
    stride = (length - side) / (k - 1)
    if stride + 1e-9 >= spec.min_stride:
        return [_round_half_up(i * stride) for i in range(k)], False
    # covering the axis would need more overlap than allowed: tile without overlap and leave the rest
    count = length // side
    margin = (length - count * side) // 2
    return [margin + i * side for i in range(count)], True


def slice_square(image: np.ndarray, spec: SliceSpec) -> SliceResult:
    """Grid of side×side crops whose pairwise overlap stays within max_overlap of the slice area."""
    h, w = image.shape[:2]
    side = spec.side
    if min(h, w) < side:
        logger.warning(f"[slice] image {h}×{w} smaller than slice side {side}; using a resized center crop")
        s = min(h, w)
        top, left = (h - s) // 2, (w - s) // 2
        return SliceResult([resize_bilinear(image[top : top + s, left : left + s], side, side)], [(top, left)], True)
    rows, warn_r = _axis_offsets(h, spec)
    cols, warn_c = _axis_offsets(w, spec)
    if warn_r or warn_c:
        logger.warning(f"[slice] image {h}×{w} cannot be covered within {spec.max_overlap:.0%} overlap")
    slices, offsets = [], []
    for top in rows:
        for left in cols:
            slices.append(image[top : top + side, left : left + side].copy())
            offsets.append((top, left))
    return SliceResult(slices, offsets, warn_r or warn_c)


def slice_directory(src: PathLike, dst: PathLike, spec: SliceSpec) -> int:
    """Slice every image under src into dst, mirroring the tree with _sNN suffixes."""
    src, dst = Path(src), Path(dst)
    written = 0
    for p in list_images(src):
        result = slice_square(load_image(p), spec)
        rel = p.relative_to(src)
        for i, sl in enumerate(result.slices):
            save_image(dst / rel.parent / f"{rel.stem}_s{i:02d}{rel.suffix}", sl)
            written += 1
    logger.info(f"[slice] wrote {written} slices to {dst}")
    return written


# -----------------------------
# Synthetic corpus
# -----------------------------
def grating(
    size: int,
    orientation: float,
    frequency: float,
    phase: float,
    tint: np.ndarray,
    rng: np.random.Generator,
    noise: float = 0.05,
) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    wave = np.sin(2.0 * np.pi * frequency * (xx * np.cos(orientation) + yy * np.sin(orientation)) + phase)
    image = tint[None, None, :] + 0.25 * wave[..., None]
    return np.clip(image + noise * rng.standard_normal(image.shape), 0.0, 1.0)


def synth_dataset(root: PathLike, num_classes: int, per_class: int, image_size: int = 32, seed: int = 0) -> LabeledDataset:
    """Oriented gratings with class-specific orientation, frequency and tint, written as PPM files."""
    if num_classes < 2:
        raise ConfigurationError(f"synthetic dataset needs at least 2 classes, got {num_classes}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    items, names = [], []
    for c in range(num_classes):
        name = f"class_{c:02d}"
        names.append(name)
        orientation = np.pi * c / num_classes
        frequency = 2.0 + (c % 3)
        tint = 0.35 + 0.3 * np.array([(c * 0.37) % 1.0, (c * 0.61) % 1.0, (c * 0.83) % 1.0])
        for i in range(per_class):
            image = grating(image_size, orientation, frequency, rng.uniform(0.0, np.pi / 4), tint, rng)
            path = save_image(root / name / f"img_{i:04d}.ppm", image)
            items.append(LabeledItem(str(path), c))
    logger.info(f"[synth] {num_classes}×{per_class} images of {image_size}px under {root}")
    return LabeledDataset(items, names)


# -----------------------------
# Batching
# -----------------------------
class ImageCache:
    """Decoded originals, loaded once per run."""

    def __init__(self):
        self._images: Dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._images:
            self._images[path] = load_image(path)
        return self._images[path]


def iterate_batches(count: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]
