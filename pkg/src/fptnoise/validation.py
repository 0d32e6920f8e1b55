"""Input validation helpers shared by estimators and core operations."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def as_image(x, image_shape) -> np.ndarray:
    """Coerce one image to float64 C x H x W, validating the shape."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != tuple(image_shape):
        raise InputError(f"expected image shape {tuple(image_shape)}, got {arr.shape}")
    return arr


def as_image_batch(x, image_shape) -> np.ndarray:
    """Coerce to float64 (N, C, H, W); a single image becomes a batch of one."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape == tuple(image_shape):
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != tuple(image_shape):
        raise InputError(
            f"expected batch of images shaped {tuple(image_shape)}, got {arr.shape}"
        )
    return arr


def check_labels(y, n_classes: int, n_expected: int | None = None) -> np.ndarray:
    """Coerce labels to int64 and bound-check them against the class count."""
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    if n_expected is not None and labels.shape[0] != n_expected:
        raise InputError(f"{labels.shape[0]} labels for {n_expected} images")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    return labels
