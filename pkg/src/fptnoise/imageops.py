"""Plain-numpy image helpers: clipping, flips, crop-and-rescale.

These run outside the autodiff tape (prediction-time transforms only).
"""

from __future__ import annotations

import numpy as np


def clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror a C x H x W image along the width axis."""
    return image[..., ::-1].copy()


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channelwise bilinear resize of a C x H x W image (half-pixel centers)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def center_crop_resize(image: np.ndarray, fraction: float = 0.875) -> np.ndarray:
    """Center-crop to `fraction` of each side, then rescale back bilinearly."""
    c, h, w = image.shape
    ch = max(1, int(round(h * fraction)))
    cw = max(1, int(round(w * fraction)))
    top = (h - ch) // 2
    left = (w - cw) // 2
    crop = image[:, top : top + ch, left : left + cw]
    return bilinear_resize(crop, h, w)
