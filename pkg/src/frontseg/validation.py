"""Input checks shared by the estimator API and the command line."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, side: Optional[int] = None) -> np.ndarray:
    """Coerce ``X`` to a float32 (N, S, S) stack of finite intensities.

    A single (S, S) grid is promoted to a batch of one, and a singleton
    channel axis (N, 1, S, S) is squeezed.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32, ensure_all_finite=True)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images shaped (N, S, S), got {X.shape}")
    if side is not None and X.shape[1] != side:
        raise ValueError(f"expected images of side {side}, got {X.shape[1]}")
    return np.ascontiguousarray(X)


def check_masks(y, like: Optional[np.ndarray] = None) -> np.ndarray:
    """Coerce ``y`` to a uint8 {0, 1} stack matching ``like`` when given."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary with values in {0, 1}")
    if like is not None and y.shape != like.shape:
        raise ValueError(f"masks {y.shape} do not match images {like.shape}")
    return y.astype(np.uint8)


def check_resolutions(resolution, n: int) -> np.ndarray:
    """Broadcast a scalar or per-sample resolution to shape (n,), all positive."""
    if resolution is None:
        return np.ones(n)
    r = np.broadcast_to(np.asarray(resolution, dtype=np.float64), (n,)).copy()
    if not np.all(r > 0):
        raise ValueError("resolutions must be positive")
    return r
