"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Tuple

import numpy as np

from .exceptions import DataError, ShapeError


def check_raster(X, name: str = "X") -> np.ndarray:
    """A finite (channels, height, width) float32 array."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"{name} must be (channels, height, width), got shape {X.shape}")
    if 0 in X.shape:
        raise ShapeError(f"{name} has an empty dimension: {X.shape}")
    if not np.isfinite(X).all():
        raise DataError(f"{name} contains NaN or infinite values")
    return X


def check_label_grid(y, shape: Tuple[int, int], name: str = "y") -> np.ndarray:
    """Integer label grid with -1 marking unsampled pixels."""
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ShapeError(f"{name} grid {y.shape} != raster grid {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.issubdtype(y.dtype, np.floating) or not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError(f"{name} must hold integer labels")
        y = y.astype(np.int64)
    if (y < -1).any():
        raise DataError(f"{name} labels must be >= 0, or -1 for unsampled pixels")
    if not (y >= 0).any():
        raise DataError(f"{name} has no sampled pixels")
    return y


def check_in_grid(x, y, shape: Tuple[int, int]) -> None:
    H, W = shape
    x, y = np.asarray(x), np.asarray(y)
    if x.size and (x.min() < 0 or y.min() < 0 or x.max() >= W or y.max() >= H):
        raise DataError(f"sample coordinates fall outside the {H}x{W} grid")


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name: str, closed: bool = False) -> float:
    lo_ok = value >= 0 if closed else value > 0
    hi_ok = value <= 1 if closed else value < 1
    if not (lo_ok and hi_ok):
        bounds = "[0, 1]" if closed else "(0, 1)"
        raise ValueError(f"{name} must lie in {bounds}, got {value!r}")
    return float(value)
