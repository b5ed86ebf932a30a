"""Losses (BCE, distance-weighted BCE) and segmentation metrics."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.morphology import thin

from . import functional as F
from .imageproc import edt
from .tensor import DTYPE, Tensor

PROB_CLAMP = 1e-7
DICE_EPS = 1e-7
WEIGHTS = (4, 8, 16)

ArrayOrTensor = Union[np.ndarray, Tensor]


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _same_shape(a, b, op: str) -> None:
    if _arr(a).shape != _arr(b).shape:
        raise ValueError(f"{op}: shape mismatch {_arr(a).shape} vs {_arr(b).shape}")


# --------------------------------------------------------------------------
# losses


def bce_map(pred: ArrayOrTensor, target: ArrayOrTensor) -> np.ndarray:
    """Per-pixel binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    _same_shape(pred, target, "bce_map")
    p = np.clip(_arr(pred).astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = _arr(target).astype(np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce(pred: ArrayOrTensor, target: ArrayOrTensor) -> Tensor:
    """Mean binary cross-entropy, differentiable with respect to ``pred``."""
    _same_shape(pred, target, "bce")
    pred_t = pred if isinstance(pred, Tensor) else Tensor(pred)
    raw = pred_t.data.astype(np.float64)
    y = _arr(target).astype(np.float64)
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = bce_map(p, y).mean()
    inside = (raw >= PROB_CLAMP) & (raw <= 1.0 - PROB_CLAMP)
    n = raw.size

    def backward(g):
        dp = (-(y / p) + (1.0 - y) / (1.0 - p)) * inside / n
        return ((dp * float(g)).astype(DTYPE),)

    return Tensor.from_op(np.asarray(loss, dtype=DTYPE), (pred_t,), backward)


def weight_map(y: np.ndarray, w: float) -> np.ndarray:
    """Distance-weight map ``2 * (sigmoid(EDT(y) / w) - 0.5) + y``.

    Exactly 1 on front pixels and rising from ~0 towards 1 with distance
    from the front.  Works on a single H x W mask or on any stack of them
    (the transform is applied to the trailing two axes).  Returned in
    float64 so that far-field values stay strictly below 1.
    """
    if not w > 0:
        raise ValueError(f"weighting parameter must be positive, got {w}")
    y = np.asarray(y)
    if y.ndim > 2:
        flat = y.reshape(-1, *y.shape[-2:])
        return np.stack([weight_map(m, w) for m in flat]).reshape(y.shape)
    if not y.any():
        raise ValueError("weight_map needs a mask with at least one front pixel")
    # 2 * (sigmoid(d / w) - 0.5) == tanh(d / (2w)), without the cancellation
    return np.tanh(edt(y) / (2.0 * w)) + (y > 0)


def weighted_prediction(pred: ArrayOrTensor, wmap: np.ndarray) -> ArrayOrTensor:
    """Pixel-wise product of the prediction with a constant weight map."""
    _same_shape(pred, wmap, "weighted_prediction")
    if isinstance(pred, Tensor):
        return F.mul(pred, Tensor(wmap))
    return np.asarray(pred) * wmap


def wbce(pred: ArrayOrTensor, y: ArrayOrTensor, w: float, wmap: Optional[np.ndarray] = None) -> Tensor:
    """BCE of the distance-weighted prediction against the unmodified labels.

    ``wmap`` may be supplied to skip recomputing the weight map.
    """
    if wmap is None:
        wmap = weight_map(_arr(y), w)
    pred_t = pred if isinstance(pred, Tensor) else Tensor(pred)
    return bce(weighted_prediction(pred_t, wmap), y)


def wbce_map(pred: np.ndarray, y: np.ndarray, w: float) -> np.ndarray:
    return bce_map(weighted_prediction(np.asarray(pred, dtype=np.float64), weight_map(y, w)), y)


# --------------------------------------------------------------------------
# overlap metrics


def soft_dice(pred: ArrayOrTensor, target: ArrayOrTensor) -> float:
    """``2 * sum(p * y) / (sum(p) + sum(y) + eps)``; 1.0 when both are empty."""
    _same_shape(pred, target, "soft_dice")
    p = _arr(pred).astype(np.float64)
    y = _arr(target).astype(np.float64)
    denom = p.sum() + y.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p * y).sum() / (denom + DICE_EPS))


def dice_binary(pred: ArrayOrTensor, target: ArrayOrTensor, thresh: float = 0.5) -> float:
    return soft_dice((_arr(pred) >= thresh).astype(np.float64), (_arr(target) > 0).astype(np.float64))


def wdice(pred: ArrayOrTensor, y: ArrayOrTensor, w: float, wmap: Optional[np.ndarray] = None) -> float:
    """Soft Dice of the distance-weighted prediction."""
    if wmap is None:
        wmap = weight_map(_arr(y), w)
    return soft_dice(weighted_prediction(_arr(pred).astype(np.float64), wmap), y)


def iou(pred: ArrayOrTensor, target: ArrayOrTensor, thresh: float = 0.5) -> float:
    _same_shape(pred, target, "iou")
    a = _arr(pred) >= thresh
    b = _arr(target) > 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# --------------------------------------------------------------------------
# line thickness / class balance


def _line_thickness(mask: np.ndarray) -> float:
    """Mean width of the thick line(s) in ``mask`` as area / centre-line length.

    The centre line is a morphological thinning.  Thinning eats roughly
    ``(t - 1) / 2`` pixels at both ends of every open segment, so each
    skeleton component adds ``t - 1`` to the length, and ``t`` solves
    ``c*t**2 + (S - c)*t - A = 0`` (A area, S skeleton pixels, c components).
    """
    area = float(mask.sum())
    skel = thin(mask)
    s = float(skel.sum())
    c = float(ndimage.label(skel, structure=np.ones((3, 3)))[1])
    b = s - c
    return (-b + math.sqrt(b * b + 4.0 * c * area)) / (2.0 * c)


def certainty_from_thickness(thickness_px: float, resolution_m: float) -> float:
    """Perpendicular tolerance of a predicted line: half its width in metres."""
    return thickness_px * resolution_m / 2.0


def thickness_and_certainty(pred_masks: Iterable[np.ndarray], resolution_m: float) -> Tuple[float, float]:
    """Average predicted-line thickness (px) over non-empty masks and the resulting certainty (m)."""
    widths = []
    for m in pred_masks:
        m = np.asarray(m) > 0
        if m.any():
            widths.append(_line_thickness(m))
    if not widths:
        warnings.warn("no predicted front pixels: thickness and certainty set to 0", RuntimeWarning, stacklevel=2)
        return 0.0, 0.0
    t = float(np.mean(widths))
    return t, certainty_from_thickness(t, resolution_m)


def imbalance_ratio(mask: np.ndarray) -> float:
    """Background-to-front pixel ratio."""
    m = np.asarray(mask) > 0
    fg = int(m.sum())
    if fg == 0:
        raise ValueError("imbalance_ratio needs at least one front pixel")
    return (m.size - fg) / fg


# --------------------------------------------------------------------------
# per-epoch record and CSV


@dataclass
class MetricsRecord:
    epoch: int = 0
    lr: float = 0.0
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    dice: float = 0.0
    wdice_4: float = 0.0
    wdice_8: float = 0.0
    wdice_16: float = 0.0
    iou: float = 0.0
    thickness_px: float = 0.0
    certainty_m: float = 0.0

    def monitor(self, name: str) -> float:
        return float(getattr(self, name))


METRICS_HEADER = [f.name for f in fields(MetricsRecord)]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def write_metrics_csv(path: Union[str, Path], records: Sequence[MetricsRecord]) -> None:
    Path(path).write_text(metrics_csv(records))


def read_metrics_csv(path: Union[str, Path]) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [
            MetricsRecord(**{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}) for row in reader
        ]
