"""Dataset directories, deterministic splits and a synthetic SAR-like front generator.

A dataset directory looks like::

    index.csv            id,image,mask,resolution_m,split
    images/<id>.png      8- or 16-bit grayscale
    masks/<id>.png       {0, 255}
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .imageproc import (
    FrontMask,
    SampleImage,
    read_image_png,
    read_mask_png,
    write_image_png,
    write_mask_png,
)

INDEX_HEADER = ["id", "image", "mask", "resolution_m", "split"]
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (144, 50, 50)


class DatasetError(ValueError):
    """Raised with every problem found in a dataset directory."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    side: int = 128
    seed: int = 0
    speckle_looks: int = 4
    front_amplitude: float = 0.1
    melange_probability: float = 0.3
    resolution_range_m: Tuple[float, float] = (20.0, 60.0)

    def validate(self) -> "SynthConfig":
        if self.side < 32:
            raise ValueError(f"side must be >= 32, got {self.side}")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")
        if not 0.0 <= self.melange_probability <= 1.0:
            raise ValueError("melange_probability must be in [0, 1]")
        if not 0.0 <= self.front_amplitude < 0.5:
            raise ValueError("front_amplitude must be in [0, 0.5)")
        lo, hi = self.resolution_range_m
        if not 0 < lo <= hi:
            raise ValueError(f"invalid resolution range {self.resolution_range_m}")
        return self


MAX_TRAVEL = 0.2  # total vertical travel of a front, as a fraction of the side


def _front_rows(rng: np.random.Generator, side: int, amplitude: float) -> np.ndarray:
    """Row of the front in every column: a smoothed random walk around a random baseline.

    Peak deviation is at most ``amplitude * side``; total vertical travel is
    capped at ``MAX_TRAVEL * side`` so that a 1-px front stays a thin class.
    """
    walk = np.cumsum(rng.standard_normal(side))
    smooth = ndimage.gaussian_filter1d(walk, sigma=side / 8.0, mode="nearest")
    smooth -= smooth.mean()
    peak = np.abs(smooth).max()
    if peak > 0:
        smooth *= amplitude * side * rng.uniform(0.5, 1.0) / peak
        travel = np.abs(np.diff(smooth)).sum()
        if travel > MAX_TRAVEL * side:
            smooth *= MAX_TRAVEL * side / travel
    base = rng.uniform(0.4, 0.6) * side
    return np.clip(np.round(base + smooth), 1, side - 2).astype(np.int64)


def rasterize_front(rows: np.ndarray, side: int) -> np.ndarray:
    """1-px, 4-connected polyline through ``(rows[c], c)`` from the left to the right edge."""
    mask = np.zeros((side, side), dtype=np.uint8)
    mask[rows[0], 0] = 1
    for c in range(1, side):
        lo, hi = sorted((rows[c - 1], rows[c]))
        mask[lo : hi + 1, c] = 1
    return mask


def _smooth_noise(rng: np.random.Generator, side: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma=sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def synth_sample(cfg: SynthConfig, index: int) -> Tuple[SampleImage, FrontMask]:
    """One synthetic scene; depends only on ``(cfg, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    side = cfg.side
    rows = _front_rows(rng, side, cfg.front_amplitude)
    mask = rasterize_front(rows, side)

    rr = np.arange(side)[:, None]
    glacier = rr < rows[None, :]
    dist = rr - rows[None, :]  # > 0 on the sea side

    intensity = np.where(glacier, 0.65, 0.22) + 0.08 * _smooth_noise(rng, side, side / 16.0)
    if rng.random() < cfg.melange_probability:
        width = rng.uniform(0.05, 0.2) * side
        blobs = _smooth_noise(rng, side, side / 40.0) > 0.3
        melange = (~glacier) & (dist < width) & blobs
        intensity = np.where(melange, 0.5, intensity)
    intensity = np.clip(intensity, 0.02, None)
    looks = cfg.speckle_looks
    speckled = intensity * rng.gamma(shape=looks, scale=1.0 / looks, size=intensity.shape)
    pixels = np.clip(speckled / np.quantile(speckled, 0.995), 0.0, 1.0)

    lo, hi = cfg.resolution_range_m
    resolution = float(rng.uniform(lo, hi))
    sid = f"synth_{cfg.seed}_{index:05d}"
    return SampleImage(pixels, resolution, sid), FrontMask(mask, resolution, sid)


def synth_generate(cfg: SynthConfig, n: int) -> List[Tuple[SampleImage, FrontMask]]:
    cfg.validate()
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [synth_sample(cfg, i) for i in range(n)]


# --------------------------------------------------------------------------
# index / directory I/O


@dataclass(frozen=True)
class DatasetEntry:
    id: str
    image: str
    mask: str
    resolution_m: float
    split: str = "train"


@dataclass
class DatasetIndex:
    root: Path
    entries: List[DatasetEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, split: str) -> "DatasetIndex":
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return DatasetIndex(self.root, [e for e in self.entries if e.split == split])

    def counts(self) -> dict:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def load(self, i: int) -> Tuple[SampleImage, FrontMask]:
        e = self.entries[i]
        img = read_image_png(self.root / e.image)
        try:
            mask = read_mask_png(self.root / e.mask)
        except ValueError:
            raise DatasetError([f"{e.id}: non-binary mask"]) from None
        if img.shape != mask.shape:
            raise DatasetError([f"{e.id}: image/mask size mismatch {img.shape} vs {mask.shape}"])
        return SampleImage(img, e.resolution_m, e.id), FrontMask(mask, e.resolution_m, e.id)

    def load_all(self) -> List[Tuple[SampleImage, FrontMask]]:
        return [self.load(i) for i in range(len(self))]

    def write_index(self) -> None:
        with open(self.root / "index.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(INDEX_HEADER)
            for e in self.entries:
                w.writerow([e.id, e.image, e.mask, repr(float(e.resolution_m)), e.split])


def write_dataset(
    root: Union[str, Path],
    samples: Sequence[Tuple[SampleImage, FrontMask]],
    splits: Optional[Sequence[str]] = None,
    bits: int = 16,
) -> DatasetIndex:
    """Write samples as PNGs plus ``index.csv``; ``splits`` defaults to all-train."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(samples)
    entries = []
    for (img, mask), split in zip(samples, splits):
        if not mask.pixels.any():
            raise DatasetError([f"{img.id}: empty mask"])
        rel_i, rel_m = f"images/{img.id}.png", f"masks/{img.id}.png"
        write_image_png(root / rel_i, img.pixels, bits=bits)
        write_mask_png(root / rel_m, mask.pixels)
        entries.append(DatasetEntry(img.id, rel_i, rel_m, float(img.resolution), split))
    index = DatasetIndex(root, entries)
    index.write_index()
    return index


def _png_size(path: Path) -> Tuple[int, int]:
    with Image.open(path) as im:
        return im.size[1], im.size[0]


def load_dataset(root: Union[str, Path]) -> DatasetIndex:
    """Read and validate ``index.csv``.

    Every entry is checked (files present, masks binary and non-empty,
    image and mask the same size); all problems are reported together in a
    :class:`DatasetError`.  Pixel data is loaded lazily via
    :meth:`DatasetIndex.load`.
    """
    root = Path(root)
    index_path = root / "index.csv"
    if not index_path.is_file():
        raise DatasetError([f"{index_path}: index file missing"])
    problems: List[str] = []
    entries: List[DatasetEntry] = []
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_HEADER:
            raise DatasetError([f"{index_path}: header must be {','.join(INDEX_HEADER)}, got {reader.fieldnames}"])
        for row in reader:
            try:
                res = float(row["resolution_m"])
            except ValueError:
                problems.append(f"{row['id']}: bad resolution {row['resolution_m']!r}")
                continue
            if not res > 0:
                problems.append(f"{row['id']}: resolution must be positive")
            if row["split"] not in SPLITS:
                problems.append(f"{row['id']}: unknown split {row['split']!r}")
            entries.append(DatasetEntry(row["id"], row["image"], row["mask"], res, row["split"]))

    seen = set()
    for e in entries:
        if e.id in seen:
            problems.append(f"{e.id}: duplicate id")
        seen.add(e.id)
        ipath, mpath = root / e.image, root / e.mask
        missing = [str(p) for p in (ipath, mpath) if not p.is_file()]
        if missing:
            problems.append(f"{e.id}: missing file {', '.join(missing)}")
            continue
        try:
            mask = read_mask_png(mpath)
        except ValueError:
            problems.append(f"{e.id}: non-binary mask")
            continue
        if not mask.any():
            problems.append(f"{e.id}: empty mask")
        if _png_size(ipath) != mask.shape:
            problems.append(f"{e.id}: image/mask size mismatch {_png_size(ipath)} vs {mask.shape}")
    if problems:
        raise DatasetError(problems)
    return DatasetIndex(root, entries)


# --------------------------------------------------------------------------
# splits


def split_counts(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> Tuple[int, ...]:
    """Largest-remainder allocation of ``n`` samples proportionally to ``ratios``."""
    ratios = [float(r) for r in ratios]
    if n < 0 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"invalid split request n={n}, ratios={ratios}")
    exact = [n * r / sum(ratios) for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def split_dataset(index: DatasetIndex, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> DatasetIndex:
    """Shuffle by ``seed`` and assign train/val/test in proportion to ``ratios``."""
    if len(ratios) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} ratios, got {len(ratios)}")
    counts = split_counts(len(index), ratios)
    order = np.random.default_rng(seed).permutation(len(index))
    labels = np.repeat(np.arange(len(SPLITS)), counts)
    assigned = [None] * len(index)
    for pos, i in enumerate(order):
        assigned[i] = replace(index.entries[i], split=SPLITS[labels[pos]])
    return DatasetIndex(index.root, assigned)
