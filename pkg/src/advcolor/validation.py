"""Input validation helpers shared by the public API."""

from __future__ import annotations

import numpy as np

from .exceptions import DomainError, ShapeError

_RANGE_TOL = 1e-9


def check_image(x, name: str = "image") -> np.ndarray:
    """Validate a single H x W x 3 sRGB image in [0, 1]; returns float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {x.shape}")
    _check_unit_range(x, name)
    return x


def check_images(X, name: str = "images") -> np.ndarray:
    """Validate a batch; a single image is promoted to a batch of one."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"{name} must have shape (N, H, W, 3), got {X.shape}")
    _check_unit_range(X, name)
    return X


def _check_unit_range(x: np.ndarray, name: str) -> None:
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo < -_RANGE_TOL or hi > 1.0 + _RANGE_TOL:
        raise DomainError(f"{name} components must lie in [0, 1], got [{lo}, {hi}]")


def check_labels(y, n_classes: int, n: int, name: str = "labels") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {y.shape}")
    y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise DomainError(f"{name} must lie in [0, {n_classes - 1}]")
    return y


def quantize255(x: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid {0, 1/255, ..., 1} (ties to even)."""
    return np.round(np.asarray(x, dtype=np.float64) * 255.0) / 255.0


def is_on_grid(x, tol: float = 1e-12) -> bool:
    x = np.asarray(x, dtype=np.float64)
    return bool(np.all(np.abs(x * 255.0 - np.round(x * 255.0)) <= 255.0 * tol))
