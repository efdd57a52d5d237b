"""Synthetic scenes with known canonical image, motion, and masks.

Frames are rendered analytically: pixel ``(u, v)`` of frame ``t`` shows the
canonical color at ``H_t(u, v) + w(u, v, t)`` where ``H_t`` is a known
homography and ``w`` an optional non-rigid sinusoidal warp. Nothing is
resampled, so the generator is an exact oracle for every fitting and
propagation test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import CanvasSpec
from .frames_io import FrameSequence, RasterCanvas, pixel_grid_uv


@dataclass(frozen=True)
class SmoothTexture:
    """Band-limited color field with one soft-edged disk "object"."""

    freqs: np.ndarray  # (K, 2) cycles per unit
    phases: np.ndarray  # (K, 3)
    amps: np.ndarray  # (K, 3)
    disk_center: tuple[float, float] = (0.5, 0.5)
    disk_radius: float = 0.15
    disk_color: tuple[float, float, float] = (0.9, 0.25, 0.2)
    disk_edge: float = 0.02

    @classmethod
    def random(cls, rng: np.random.Generator, n_waves: int = 6, max_freq: float = 2.5, **disk) -> "SmoothTexture":
        angle = rng.uniform(0, 2 * np.pi, n_waves)
        mag = rng.uniform(0.6, max_freq, n_waves)
        freqs = np.stack([mag * np.cos(angle), mag * np.sin(angle)], axis=1)
        phases = rng.uniform(0, 2 * np.pi, (n_waves, 3))
        amps = rng.uniform(0.3, 1.0, (n_waves, 3))
        amps *= 0.32 / amps.sum(axis=0, keepdims=True)
        return cls(freqs, phases, amps, **disk)

    def disk_weight(self, u, v) -> np.ndarray:
        r = np.hypot(np.asarray(u) - self.disk_center[0], np.asarray(v) - self.disk_center[1])
        return 1.0 / (1.0 + np.exp((r - self.disk_radius) / (self.disk_edge / 4.0)))

    def disk_mask(self, u, v) -> np.ndarray:
        r = np.hypot(np.asarray(u) - self.disk_center[0], np.asarray(v) - self.disk_center[1])
        return r <= self.disk_radius

    def __call__(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        arg = 2 * np.pi * (u[..., None] * self.freqs[:, 0] + v[..., None] * self.freqs[:, 1])
        base = 0.5 + np.sum(self.amps * np.sin(arg[..., None] + self.phases), axis=-2)
        w = self.disk_weight(u, v)[..., None]
        rgb = (1 - w) * base + w * np.asarray(self.disk_color)
        return np.clip(rgb, 0.0, 1.0)


def homography_apply(mats: np.ndarray, u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = mats[2, 0] * u + mats[2, 1] * v + mats[2, 2]
    return (mats[0, 0] * u + mats[0, 1] * v + mats[0, 2]) / w, (mats[1, 0] * u + mats[1, 1] * v + mats[1, 2]) / w


def smooth_trajectory(T: int, shift_px: float = 4.0, size: int = 96, rotation: float = 0.03,
                      zoom: float = 0.03, perspective: float = 0.02, phase: float = 0.0) -> np.ndarray:
    """Gentle camera motion centered on the identity, ``(T, 3, 3)`` frame -> canonical."""
    s = np.linspace(-1.0, 1.0, T)
    mats = np.empty((T, 3, 3))
    for t, x in enumerate(s):
        tx = shift_px / size * np.sin(np.pi * 0.5 * x + phase)
        ty = 0.6 * shift_px / size * np.sin(np.pi * x + phase)
        th = rotation * x
        sc = 1.0 + zoom * x
        c, sn = np.cos(th), np.sin(th)
        A = np.array([[sc * c, -sc * sn, 0.0], [sc * sn, sc * c, 0.0], [0.0, 0.0, 1.0]])
        # rotate/scale about the frame center, then translate
        center = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1.0]])
        uncenter = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1.0]])
        P = np.eye(3)
        P[2, 0] = perspective * x
        mats[t] = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1.0]]) @ center @ P @ A @ uncenter
        mats[t] /= mats[t][2, 2]
    return mats


def translation_trajectory(T: int, step_u: float = 0.01, step_v: float = 0.0, offset_u: float = 0.0) -> np.ndarray:
    """``h13 = offset_u + step_u * t``; ``h23 = step_v * t``."""
    mats = np.tile(np.eye(3), (T, 1, 1))
    mats[:, 0, 2] = offset_u + step_u * np.arange(T)
    mats[:, 1, 2] = step_v * np.arange(T)
    return mats


def sinusoidal_warp(amplitude_px: float, height: int, width: int, cycles: float = 1.5) -> Callable:
    """Non-rigid warp ``w(u, v, t_norm)`` of the given pixel amplitude."""
    au = amplitude_px / width
    av = amplitude_px / height

    def warp(u, v, t_norm):
        du = au * np.sin(2 * np.pi * (cycles * v + t_norm))
        dv = av * np.sin(2 * np.pi * (cycles * u - t_norm) + 1.0)
        return du, dv

    return warp


@dataclass
class SyntheticScene:
    frames: FrameSequence
    texture: SmoothTexture
    homographies: np.ndarray
    warp: Callable | None = None
    masks: np.ndarray = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.frames.T

    def canonical_coords(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth canonical coordinates of every pixel of frame ``t``."""
        u, v = pixel_grid_uv(self.frames.height, self.frames.width)
        return _gt_coords(self.homographies[t], self.warp, u, v, t / max(self.T - 1, 1))

    def gt_canonical(self, spec: CanvasSpec) -> RasterCanvas:
        uu, vv = spec.grid_uv()
        return RasterCanvas(self.texture(uu, vv), spec.origin_uv, spec.scale)

    def gt_canonical_mask(self, spec: CanvasSpec) -> np.ndarray:
        uu, vv = spec.grid_uv()
        return self.texture.disk_mask(uu, vv)

    def bounds(self, margin: float = 0.0) -> tuple[float, float, float, float]:
        us, vs = [], []
        for t in range(self.T):
            u, v = self.canonical_coords(t)
            us.append(u)
            vs.append(v)
        us = np.concatenate([a.ravel() for a in us])
        vs = np.concatenate([a.ravel() for a in vs])
        return (us.min() - margin, vs.min() - margin, us.max() + margin, vs.max() + margin)

    def coverage(self, spec: CanvasSpec, min_frames: int = 1) -> np.ndarray:
        """Canvas pixels seen by at least ``min_frames`` frames (homography part only)."""
        uu, vv = spec.grid_uv()
        count = np.zeros(uu.shape, dtype=np.int64)
        h, w = self.frames.height, self.frames.width
        for t in range(self.T):
            inv = np.linalg.inv(self.homographies[t])
            fu, fv = homography_apply(inv, uu, vv)
            x = fu * w - 0.5
            y = fv * h - 0.5
            count += (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        return count >= min_frames


def _gt_coords(mat, warp, u, v, t_norm):
    cu, cv = homography_apply(mat, u, v)
    if warp is not None:
        du, dv = warp(u, v, t_norm)
        cu, cv = cu + du, cv + dv
    return cu, cv


def make_scene(T: int = 20, size: int = 96, seed: int = 0, trajectory: np.ndarray | None = None,
               warp_amplitude_px: float = 0.0, texture: SmoothTexture | None = None, height: int | None = None,
               fps: float | None = None) -> SyntheticScene:
    """Render a scene of ``T`` frames of ``height x size`` pixels."""
    rng = np.random.default_rng(seed)
    height = height or size
    if texture is None:
        texture = SmoothTexture.random(rng)
    mats = smooth_trajectory(T, size=size) if trajectory is None else np.asarray(trajectory, dtype=np.float64)
    warp = sinusoidal_warp(warp_amplitude_px, height, size) if warp_amplitude_px else None
    u, v = pixel_grid_uv(height, size)
    frames = np.empty((T, height, size, 3))
    masks = np.empty((T, height, size), dtype=bool)
    for t in range(T):
        cu, cv = _gt_coords(mats[t], warp, u, v, t / max(T - 1, 1))
        frames[t] = texture(cu, cv)
        masks[t] = texture.disk_mask(cu, cv)
    return SyntheticScene(FrameSequence(frames, fps=fps), texture, mats, warp, masks)


def homography_scene(T: int = 20, size: int = 96, seed: int = 0, warp_amplitude_px: float = 0.0) -> SyntheticScene:
    """Known canonical + smooth homography trajectory (+ optional non-rigid warp)."""
    return make_scene(T, size, seed, smooth_trajectory(T, size=size), warp_amplitude_px)


def large_translation_scene(T: int = 20, size: int = 96, seed: int = 0, max_shift_px: float = 15.0) -> SyntheticScene:
    """Camera pans from -max_shift to +max_shift pixels horizontally."""
    shifts = np.linspace(-max_shift_px, max_shift_px, T) / size
    mats = np.tile(np.eye(3), (T, 1, 1))
    mats[:, 0, 2] = shifts
    return make_scene(T, size, seed, mats)


def translation_scene(T: int = 10, size: int = 64, step_u: float = 0.01, seed: int = 0) -> SyntheticScene:
    """``h13 = step_u * t``: canonical content drifts by ``-step_u`` per frame in the image."""
    return make_scene(T, size, seed, translation_trajectory(T, step_u))


def two_shot_video(T: int = 120, size: int = 64, seed: int = 0) -> tuple[FrameSequence, int]:
    """Two unrelated shots back to back; returns the video and the cut index."""
    cut = T // 2
    a = make_scene(cut, size, seed, smooth_trajectory(cut, size=size, shift_px=3.0))
    b = make_scene(T - cut, size, seed + 1, smooth_trajectory(T - cut, size=size, shift_px=3.0, phase=1.0))
    return FrameSequence(np.concatenate([a.frames.frames, b.frames.frames])), cut


def static_video(T: int = 5, size: int = 32, seed: int = 0) -> FrameSequence:
    rng = np.random.default_rng(seed)
    frame = rng.uniform(0, 1, (size, size, 3))
    return FrameSequence(np.repeat(frame[None], T, axis=0))


def texture_image(height: int, width: int, seed: int = 0, smooth: float = 1.0) -> np.ndarray:
    """Random textured RGB image, lightly blurred so bilinear sampling is accurate."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (height, width, 3))
    if smooth > 0:
        img = gaussian_filter(img, sigma=(smooth, smooth, 0), mode="wrap")
        img = (img - img.min()) / (img.max() - img.min())
    return img


def translating_video(T: int = 6, size: int = 48, shift_px: tuple[int, int] = (2, 0), seed: int = 0) -> FrameSequence:
    """Window sliding over a larger texture by an integer pixel shift per frame.

    Frame ``t`` shows texture pixel ``(x + t*dx, y + t*dy)`` at ``(x, y)``, so
    the exact flow from frame ``a`` to frame ``b`` is ``-(b - a) * shift``.
    """
    dx, dy = shift_px
    pad = (T - 1) * max(abs(dx), abs(dy)) + 1
    big = texture_image(size + 2 * pad, size + 2 * pad, seed)
    frames = [big[pad + t * dy:pad + t * dy + size, pad + t * dx:pad + t * dx + size] for t in range(T)]
    return FrameSequence(np.stack(frames))
