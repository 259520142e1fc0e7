"""Pixel-space helpers shared by augmentation, ingestion and the generator.

Images here are (h, w, 3) float64 arrays in [0, 1].  Resampling is bilinear
with edge replication (coordinates clamped to the image), which keeps the
output size unchanged and avoids introducing out-of-range values.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample `img` at fractional coordinates (sy, sx), clamping to edges."""
    h, w = img.shape[:2]
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    wy = sy - y0
    wx = sx - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    wy = wy[..., None]
    wx = wx[..., None]
    top = img[y0c, x0c] * (1 - wx) + img[y0c, x1c] * wx
    bot = img[y1c, x0c] * (1 - wx) + img[y1c, x1c] * wx
    return top * (1 - wy) + bot * wy


def rotate(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate image content by theta degrees about the image center.

    theta = 0 reproduces the input exactly.  A point at offset (dx, dy)
    from the center lands at (dx cos t - dy sin t, dx sin t + dy cos t).
    """
    h, w = img.shape[:2]
    t = np.deg2rad(theta_deg)
    cos_t, sin_t = np.cos(t), np.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = ys - cy
    dx = xs - cx
    # inverse map: where in the source does each output pixel come from
    sx = cx + cos_t * dx + sin_t * dy
    sy = cy - sin_t * dx + cos_t * dy
    return bilinear_sample(img, sy, sx)


def mirror(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :]


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel coordinate convention."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy, sx = np.meshgrid(sy, sx, indexing="ij")
    return bilinear_sample(img, sy, sx)
