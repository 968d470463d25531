"""Bilinear image resampling for crops and geometric distortion.

Images are float64 arrays of shape (h, w, c) with values in [0, 1]; pixel
(r, q) covers the normalized square [q/w, (q+1)/w] x [r/h, (r+1)/h], so its
center sits at ((q+0.5)/w, (r+0.5)/h).
"""

from __future__ import annotations

import numpy as np

from .geometry import BBox


def _bilinear(image: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Sample at fractional pixel coordinates with edge clamping."""
    h, w, _ = image.shape
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_window(image: np.ndarray, window: BBox, out_h: int, out_w: int) -> np.ndarray:
    """Resample the image content under ``window`` to (out_h, out_w).

    ``window`` is in the image's normalized frame; output pixel centers map
    affinely onto the window.
    """
    h, w, _ = image.shape
    u = (np.arange(out_w) + 0.5) / out_w
    v = (np.arange(out_h) + 0.5) / out_h
    x_norm = window.xmin + u * window.width
    y_norm = window.ymin + v * window.height
    px = x_norm * w - 0.5
    py = y_norm * h - 0.5
    return _bilinear(image, py[:, None], px[None, :])


def stretch_axis(image: np.ndarray, factor: float, axis: str) -> np.ndarray:
    """Stretch content by ``factor`` about the image center along one axis.

    The output frame has the original size, so the magnified content is
    cropped at the borders. ``factor`` = 1 returns an exact copy.
    """
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    if factor == 1.0:
        return image.copy()
    h, w, _ = image.shape
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    if axis == "x":
        u = 0.5 + (u - 0.5) / factor
    else:
        v = 0.5 + (v - 0.5) / factor
    px = u * w - 0.5
    py = v * h - 0.5
    return _bilinear(image, py[:, None], px[None, :])


def stretch_box(box: BBox, factor: float, axis: str) -> BBox:
    """Apply the ``stretch_axis`` affine map to a box and clip to the frame."""
    def fwd(v: float) -> float:
        return 0.5 + factor * (v - 0.5)

    if axis == "x":
        out = BBox(fwd(box.xmin), box.ymin, fwd(box.xmax), box.ymax)
    else:
        out = BBox(box.xmin, fwd(box.ymin), box.xmax, fwd(box.ymax))
    return out.clip()
