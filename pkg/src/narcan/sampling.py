"""Bilinear and nearest-neighbor lookups on numpy rasters.

Positions are continuous pixel coordinates: ``x`` is the column, ``y`` the
row, and integer values hit pixel centers exactly.
"""

from __future__ import annotations

import numpy as np

# tolerance for samples that land a rounding error outside the raster
EDGE_EPS = 1e-6


def inside(x, y, height: int, width: int, eps: float = EDGE_EPS) -> np.ndarray:
    x = np.asarray(x)
    y = np.asarray(y)
    return (x >= -eps) & (x <= width - 1 + eps) & (y >= -eps) & (y <= height - 1 + eps)


def bilinear(image: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``image`` (H x W [x C]) at ``(x, y)``.

    Returns ``(values, valid)``; out-of-range samples are clamped to the
    border and flagged invalid.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = inside(x, y, h, w) & np.isfinite(x) & np.isfinite(y)
    xc = np.clip(np.nan_to_num(x), 0.0, w - 1)
    yc = np.clip(np.nan_to_num(y), 0.0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    if squeeze:
        out = out[..., 0]
    return out, valid


def nearest(image: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image)
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = inside(x, y, h, w) & np.isfinite(x) & np.isfinite(y)
    xi = np.clip(np.round(np.nan_to_num(x)).astype(np.int64), 0, w - 1)
    yi = np.clip(np.round(np.nan_to_num(y)).astype(np.int64), 0, h - 1)
    return img[yi, xi], valid


def backward_warp(image: np.ndarray, flow_px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``image`` at ``pixel + flow`` for every pixel of the flow grid.

    ``flow_px`` is ``H x W x 2`` in pixels (dx, dy).
    """
    h, w = flow_px.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear(image, xs + flow_px[..., 0], ys + flow_px[..., 1])
