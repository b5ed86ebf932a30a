"""Non-differentiable image operations: filtering, padding, resizing,
label thickening, exact distance transform, augmentation and PNG I/O."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .functional import bilinear_weights

MEDIAN_AREA_M2 = 2500.0


@dataclass(frozen=True)
class SampleImage:
    """Grayscale intensity grid in [0, 1] plus its ground resolution (m/px)."""

    pixels: np.ndarray
    resolution: float
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ValueError(f"image {self.id!r}: expected a non-empty 2-D grid, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError(f"image {self.id!r}: non-finite pixel values")
        if not self.resolution > 0:
            raise ValueError(f"image {self.id!r}: resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class FrontMask:
    """Binary front-line label (1 = calving front)."""

    pixels: np.ndarray
    resolution: float
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"mask {self.id!r}: expected a 2-D grid, got shape {px.shape}")
        if not np.isin(px, (0, 1)).all():
            raise ValueError(f"mask {self.id!r}: non-binary mask")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


Grid = Union[SampleImage, FrontMask, np.ndarray]


def _pixels(obj: Grid) -> np.ndarray:
    return obj.pixels if isinstance(obj, (SampleImage, FrontMask)) else np.asarray(obj)


def _rewrap(obj: Grid, pixels: np.ndarray, resolution_scale: float = 1.0) -> Grid:
    if isinstance(obj, (SampleImage, FrontMask)):
        return replace(obj, pixels=pixels, resolution=obj.resolution * resolution_scale)
    return pixels


# --------------------------------------------------------------------------
# filtering / intensity


def median_kernel_side(resolution: float, area_m2: float = MEDIAN_AREA_M2) -> int:
    """Odd square-kernel side covering ``area_m2`` on the ground, at least 3."""
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    n = int(math.floor(math.sqrt(area_m2) / resolution + 0.5))
    if n % 2 == 0:
        n += 1
    return max(3, n)


def adaptive_median_filter(img: SampleImage, area_m2: float = MEDIAN_AREA_M2) -> SampleImage:
    side = median_kernel_side(img.resolution, area_m2)
    return replace(img, pixels=ndimage.median_filter(img.pixels, size=side, mode="nearest"))


def normalize_intensity(pixels: np.ndarray) -> np.ndarray:
    """Standardize to zero mean / unit variance, then map affinely onto [0, 1]."""
    px = np.asarray(pixels, dtype=np.float64)
    std = px.std()
    z = (px - px.mean()) / std if std > 0 else np.zeros_like(px)
    lo, hi = z.min(), z.max()
    if hi - lo <= 0:
        return np.zeros_like(z)
    return (z - lo) / (hi - lo)


# --------------------------------------------------------------------------
# geometry


def square_padding(h: int, w: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """((top, bottom), (left, right)) zero padding; an odd surplus goes bottom/right."""
    side = max(h, w)
    dh, dw = side - h, side - w
    return (dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2)


def zero_pad_to_square(obj: Grid) -> Grid:
    px = _pixels(obj)
    return _rewrap(obj, np.pad(px, square_padding(*px.shape)))


def crop_from_square(square: np.ndarray, original_shape: Tuple[int, int]) -> np.ndarray:
    """Undo :func:`zero_pad_to_square` given the pre-padding shape."""
    (top, _), (left, _) = square_padding(*original_shape)
    h, w = original_shape
    return square[top : top + h, left : left + w]


def bilinear_resize(obj: Grid, out_side: int) -> Grid:
    """Bilinear resampling of a square grid (half-pixel centres, no antialiasing).

    The resolution of a :class:`SampleImage` is rescaled by
    ``in_side / out_side``.
    """
    if out_side < 1:
        raise ValueError(f"out_side must be >= 1, got {out_side}")
    px = np.asarray(_pixels(obj), dtype=np.float64)
    if px.shape[0] != px.shape[1]:
        raise ValueError(f"bilinear_resize expects a square grid, got {px.shape}")
    a = bilinear_weights(px.shape[0], out_side)
    return _rewrap(obj, a @ px @ a.T, px.shape[0] / out_side)


def resize_mask(mask: Union[FrontMask, np.ndarray], out_side: int) -> Union[FrontMask, np.ndarray]:
    """Nearest-neighbour resize of a square binary mask that never drops a front pixel.

    Downscaling maps every foreground pixel centre into the output cell
    containing it; upscaling samples the source pixel under each output
    centre.
    """
    px = np.asarray(_pixels(mask)).astype(bool)
    n = px.shape[0]
    if px.shape[0] != px.shape[1]:
        raise ValueError(f"resize_mask expects a square grid, got {px.shape}")
    if out_side < 1:
        raise ValueError(f"out_side must be >= 1, got {out_side}")
    if out_side <= n:
        out = np.zeros((out_side, out_side), dtype=np.uint8)
        r, c = np.nonzero(px)
        rr = np.minimum(((r + 0.5) * out_side / n).astype(np.int64), out_side - 1)
        cc = np.minimum(((c + 0.5) * out_side / n).astype(np.int64), out_side - 1)
        out[rr, cc] = 1
    else:
        src = np.minimum(((np.arange(out_side) + 0.5) * n / out_side).astype(np.int64), n - 1)
        out = px[np.ix_(src, src)].astype(np.uint8)
    return _rewrap(mask, out, n / out_side)


# --------------------------------------------------------------------------
# morphology / distance


def disk(radius: int) -> np.ndarray:
    """Euclidean disk structuring element, ``dy**2 + dx**2 <= radius**2``."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def dilate_to_width(mask: Union[FrontMask, np.ndarray], target_width: int) -> Union[FrontMask, np.ndarray]:
    """Thicken a front line with a disk of radius ``(target_width - 1) // 2``."""
    if target_width < 1:
        raise ValueError(f"target width must be >= 1, got {target_width}")
    px = np.asarray(_pixels(mask)).astype(bool)
    radius = (target_width - 1) // 2
    if radius == 0 or not px.any():
        return _rewrap(mask, px.astype(np.uint8))
    out = ndimage.binary_dilation(px, structure=disk(radius))
    return _rewrap(mask, out.astype(np.uint8))


def _column_sq_distance(fg: np.ndarray) -> np.ndarray:
    """Squared distance to the nearest foreground pixel in the same column (inf if none)."""
    h, w = fg.shape
    rows = np.arange(h)[:, None]
    above = np.where(fg, rows, -1)
    above = np.maximum.accumulate(above, axis=0)
    below = np.where(fg, rows, h + h)
    below = np.minimum.accumulate(below[::-1], axis=0)[::-1]
    d_above = np.where(above >= 0, rows - above, np.inf)
    d_below = np.where(below < h, below - rows, np.inf)
    d = np.minimum(d_above, d_below)
    return d * d


def _lower_envelope_1d(f: Sequence[float]) -> List[float]:
    """Exact 1-D squared distance transform: ``min_q (p - q)**2 + f[q]``.

    Lower envelope of parabolas; sites with infinite ``f`` are skipped.
    """
    n = len(f)
    sites = [q for q in range(n) if f[q] != math.inf]
    if not sites:
        return [math.inf] * n
    v = [0] * len(sites)
    z = [0.0] * (len(sites) + 1)
    k = 0
    v[0] = sites[0]
    z[0] = -math.inf
    z[1] = math.inf
    for q in sites[1:]:
        fq = f[q] + q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    out = [0.0] * n
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        d = p - v[k]
        out[p] = d * d + f[v[k]]
    return out


def edt(mask: Union[FrontMask, np.ndarray]) -> np.ndarray:
    """Exact Euclidean distance (in pixels) from every pixel to the nearest front pixel.

    Separable: per-column distances first, then a lower-envelope pass along
    each row.  An empty mask yields an all-``inf`` field and a warning.
    """
    fg = np.asarray(_pixels(mask)).astype(bool)
    if not fg.any():
        warnings.warn("edt of an empty mask: returning an all-inf field", RuntimeWarning, stacklevel=2)
        return np.full(fg.shape, np.inf)
    col = _column_sq_distance(fg)
    sq = np.array([_lower_envelope_1d(row) for row in col.tolist()], dtype=np.float64)
    return np.sqrt(sq)


# --------------------------------------------------------------------------
# augmentation


def _dihedral(px: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(px, k)
    if flip:
        out = np.flipud(out)
    return np.ascontiguousarray(out)


def augment_expand(pairs: Sequence[Tuple[Grid, Grid]]) -> List[Tuple[Grid, Grid]]:
    """Expand each (image, mask) pair into its 8 rotation/vertical-flip variants.

    Order per pair: rotations 0, 90, 180, 270 degrees, each followed by its
    vertically flipped copy.  Variant ids get a ``_r<k>`` / ``_r<k>f`` suffix.
    """
    out = []
    for image, mask in pairs:
        ipx, mpx = _pixels(image), _pixels(mask)
        if ipx.shape[0] != ipx.shape[1] or mpx.shape != ipx.shape:
            raise ValueError(f"augment_expand needs square, matching grids; got {ipx.shape} and {mpx.shape}")
        for k in range(4):
            for flip in (False, True):
                tag = f"_r{k * 90}{'f' if flip else ''}"
                new_i = _rewrap(image, _dihedral(ipx, k, flip))
                new_m = _rewrap(mask, _dihedral(mpx, k, flip))
                if isinstance(new_i, SampleImage):
                    new_i = replace(new_i, id=new_i.id + tag)
                if isinstance(new_m, FrontMask):
                    new_m = replace(new_m, id=new_m.id + tag)
                out.append((new_i, new_m))
    return out


# --------------------------------------------------------------------------
# PNG I/O


def read_image_png(path: Union[str, Path]) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG as floats in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_image_png(path: Union[str, Path], pixels: np.ndarray, bits: int = 16) -> None:
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(px * 65535.0).astype(np.uint16)).save(path)
    elif bits == 8:
        Image.fromarray(np.round(px * 255.0).astype(np.uint8), mode="L").save(path)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")


def read_mask_png(path: Union[str, Path]) -> np.ndarray:
    """Read a {0, 255} PNG mask as a {0, 1} uint8 grid; other values raise ValueError."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: mask must be single-channel")
    if not np.isin(arr, (0, 255)).all():
        raise ValueError(f"{path}: non-binary mask")
    return (arr == 255).astype(np.uint8)


def write_mask_png(path: Union[str, Path], mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def preprocess_pair(
    image: SampleImage,
    mask: FrontMask,
    size: int = 512,
    front_width: int = 6,
    area_m2: float = MEDIAN_AREA_M2,
) -> Tuple[SampleImage, FrontMask]:
    """Full input chain: median filter at native resolution, intensity
    normalization, zero-pad to square, resize to ``size``, and thicken the
    resized front to ``front_width`` pixels."""
    if image.shape != mask.shape:
        raise ValueError(f"{image.id}: image {image.shape} and mask {mask.shape} differ in shape")
    img = adaptive_median_filter(image, area_m2)
    img = replace(img, pixels=normalize_intensity(img.pixels))
    img = bilinear_resize(zero_pad_to_square(img), size)
    img = replace(img, pixels=np.clip(img.pixels, 0.0, 1.0))
    m = resize_mask(zero_pad_to_square(mask), size)
    m = dilate_to_width(m, front_width)
    return img, m
