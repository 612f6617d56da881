"""Input checking shared by the estimators and the metric functions."""
from __future__ import annotations

import numpy as np

from .diffcore import DimensionError


def check_points(x, name: str = "points") -> np.ndarray:
    """Return ``x`` as a float64 ``(V, 3)`` array of finite coordinates."""
    x = getattr(x, "points", x)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{name}: expected shape (V, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name}: point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite coordinates")
    return arr


def check_cloud_batch(X, name: str = "X", n_points: int | None = None) -> np.ndarray:
    """Return ``X`` as a float64 ``(N, V, 3)`` array.

    A single ``(V, 3)`` cloud is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name}: expected shape (N, V, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: empty input of shape {arr.shape}")
    if n_points is not None and arr.shape[1] != n_points:
        raise DimensionError(f"{name}: model was built for V={n_points}, got V={arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite coordinates")
    return arr


def check_same_size(y: np.ndarray, x: np.ndarray, op: str) -> None:
    if y.shape != x.shape:
        raise DimensionError(f"{op}: point counts differ ({y.shape[0]} vs {x.shape[0]})")


def check_codes(codes, width: int | None = None, name: str = "codes") -> np.ndarray:
    arr = np.asarray(codes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise DimensionError(f"{name}: expected width {width}, got {arr.shape[1]}")
    return arr
