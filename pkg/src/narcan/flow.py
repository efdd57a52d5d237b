"""Dense flow fields and flow backends.

A :class:`FlowField` from image ``a`` to image ``b`` stores, for every pixel
of ``a``, the displacement ``(du, dv)`` in normalized units to the
corresponding point of ``b``. Backward-warping ``b`` with it aligns ``b`` to
``a``'s pixel grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionMismatch, InvalidInput, IoFailure
from .sampling import backward_warp, bilinear, nearest


@dataclass(frozen=True, eq=False)
class FlowField:
    flow: np.ndarray  # H x W x 2, normalized (du, dv)
    valid_mask: np.ndarray  # H x W bool

    def __post_init__(self):
        flow = np.asarray(self.flow, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if flow.ndim != 3 or flow.shape[2] != 2 or mask.shape != flow.shape[:2]:
            raise InvalidInput(f"flow must be H x W x 2 with an H x W mask, got {flow.shape} / {mask.shape}")
        if not np.all(np.isfinite(flow[mask])):
            raise InvalidInput("flow must be finite where valid")
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]

    def to_pixels(self) -> np.ndarray:
        """Displacement in pixels, ``(dx, dy)``."""
        return self.flow * np.array([self.width, self.height], dtype=np.float64)

    @classmethod
    def from_pixels(cls, flow_px, valid_mask=None) -> "FlowField":
        flow_px = np.asarray(flow_px, dtype=np.float64)
        h, w = flow_px.shape[:2]
        if valid_mask is None:
            valid_mask = np.ones((h, w), dtype=bool)
        return cls(flow_px / np.array([w, h], dtype=np.float64), valid_mask)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))

    def warp(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backward-warp ``image`` (the flow's target) onto this flow's grid."""
        if image.shape[:2] != self.shape:
            raise DimensionMismatch(f"image {image.shape[:2]} vs flow {self.shape}")
        out, inb = backward_warp(image, self.to_pixels())
        return out, inb & self.valid_mask

    def compose(self, other: "FlowField") -> "FlowField":
        """Flow ``a -> c`` from ``self: a -> b`` and ``other: b -> c``."""
        px = self.to_pixels()
        h, w = self.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        other_px, inb = bilinear(other.to_pixels(), xs + px[..., 0], ys + px[..., 1])
        ok, _ = nearest(other.valid_mask, xs + px[..., 0], ys + px[..., 1])
        return FlowField.from_pixels(px + other_px, self.valid_mask & inb & ok)


class FlowBackend:
    """Computes ``flow(a -> b)``; ``src``/``dst`` are optional frame indices."""

    name = "abstract"

    def __call__(self, a: np.ndarray, b: np.ndarray, src: int | None = None, dst: int | None = None) -> FlowField:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionMismatch(f"flow endpoints differ in shape: {a.shape} vs {b.shape}")
        return self.compute(a, b, src, dst)

    def compute(self, a, b, src, dst) -> FlowField:
        raise NotImplementedError


class ZeroFlow(FlowBackend):
    name = "zero"

    def compute(self, a, b, src, dst):
        return FlowField.zeros(*a.shape[:2])


class FunctionFlow(FlowBackend):
    """Injects known flow: ``fn(src, dst, height, width)`` returns pixel flow
    (``H x W x 2``) or a ``(flow_px, valid)`` pair."""

    name = "function"

    def __init__(self, fn: Callable):
        self.fn = fn

    def compute(self, a, b, src, dst):
        out = self.fn(src, dst, a.shape[0], a.shape[1])
        if isinstance(out, tuple):
            return FlowField.from_pixels(*out)
        return FlowField.from_pixels(out)


def translation_flow(shift_px_per_frame: tuple[float, float]) -> FunctionFlow:
    """Exact flow of a video whose content moves ``-shift`` pixels per frame
    (see :func:`narcan.synthetic.translating_video`)."""
    dx, dy = shift_px_per_frame

    def fn(src, dst, h, w):
        steps = dst - src
        flow = np.empty((h, w, 2))
        flow[..., 0] = -steps * dx
        flow[..., 1] = -steps * dy
        return flow

    return FunctionFlow(fn)


class BlockMatchingFlow(FlowBackend):
    """Exhaustive integer-shift block matching (slow reference oracle).

    For every pixel of ``a`` the shift in ``[-radius, radius]^2`` minimizing
    the patch SSD against ``b`` wins; ties go to the smallest shift. Pixels
    whose patch in ``a`` is flat (variance below ``texture_threshold``) are
    marked invalid, as are matches whose target leaves the image.
    """

    name = "block_matching"

    def __init__(self, patch: int = 8, radius: int = 12, texture_threshold: float = 1e-5):
        self.patch = patch
        self.radius = radius
        self.texture_threshold = texture_threshold

    def compute(self, a, b, src, dst):
        h, w = a.shape[:2]
        r = self.radius
        a3 = a if a.ndim == 3 else a[:, :, None]
        b3 = b if b.ndim == 3 else b[:, :, None]
        padded = np.pad(b3, ((r, r), (r, r), (0, 0)), mode="edge")
        shifts = sorted(
            ((dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)),
            key=lambda s: (s[0] ** 2 + s[1] ** 2, s[1], s[0]),
        )
        best = np.full((h, w), np.inf)
        best_dx = np.zeros((h, w))
        best_dy = np.zeros((h, w))
        ys, xs = np.mgrid[0:h, 0:w]
        for dx, dy in shifts:
            shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            ssd = uniform_filter(np.sum((a3 - shifted) ** 2, axis=2), size=self.patch, mode="nearest")
            inb = (xs + dx >= 0) & (xs + dx < w) & (ys + dy >= 0) & (ys + dy < h)
            # strict improvement with a relative margin keeps the smallest shift on ties
            tol = np.where(np.isfinite(best), 1e-12 * (1.0 + np.abs(best)), 0.0)
            better = inb & (ssd < best - tol)
            best = np.where(better, ssd, best)
            best_dx = np.where(better, dx, best_dx)
            best_dy = np.where(better, dy, best_dy)
        gray = a3.mean(axis=2)
        mean = uniform_filter(gray, size=self.patch, mode="nearest")
        var = uniform_filter(gray ** 2, size=self.patch, mode="nearest") - mean ** 2
        valid = np.isfinite(best) & (var > self.texture_threshold)
        flow_px = np.stack([best_dx, best_dy], axis=-1)
        return FlowField.from_pixels(flow_px, valid)


_FLOW_MAGIC = b"NRCF"


def save_flow(flow: FlowField, path) -> None:
    """Flow cache file: magic, uint32 height and width, float32 H*W*2 flow,
    then uint8 H*W valid mask; all little-endian."""
    path = Path(path)
    h, w = flow.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_FLOW_MAGIC + struct.pack("<II", h, w))
            fh.write(flow.flow.astype("<f4").tobytes())
            fh.write(flow.valid_mask.astype(np.uint8).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write flow cache {path}: {exc}") from exc


def load_flow(path) -> FlowField:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read flow cache {path}: {exc}") from exc
    if data[:4] != _FLOW_MAGIC:
        raise IoFailure(f"{path} is not a flow cache file")
    h, w = struct.unpack("<II", data[4:12])
    n = h * w * 2 * 4
    flow = np.frombuffer(data[12:12 + n], dtype="<f4").reshape(h, w, 2)
    mask = np.frombuffer(data[12 + n:12 + n + h * w], dtype=np.uint8).reshape(h, w).astype(bool)
    return FlowField(flow.astype(np.float64), mask)


def flow_backend_from_name(name: str, **kwargs) -> FlowBackend:
    if name in ("block_matching", "reference"):
        return BlockMatchingFlow(**kwargs)
    if name == "zero":
        return ZeroFlow()
    raise InvalidInput(f"unknown flow backend {name!r}")
