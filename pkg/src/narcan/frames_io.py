"""Frame sequences, canonical rasters, and their on-disk formats.

Coordinates are normalized with the pixel-center convention
``u = (x + 0.5) / W``, ``v = (y + 0.5) / H``; frame indices are presented to
networks as ``t_norm = index / (T - 1)``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DecodeFailure,
    DimensionMismatch,
    EmptyDirectory,
    InvalidInput,
    IoFailure,
    ManifestMissing,
)

MIN_SIDE = 8


def as_rgb_image(pixels) -> np.ndarray:
    """Validate an ``H x W x 3`` image in [0, 1] and return it as float64."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInput(f"expected H x W x 3 image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise InvalidInput(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise InvalidInput("image contains non-finite values")
    return img


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """An ordered stack of RGB frames, ``frames[t]`` is ``H x W x 3`` in [0, 1]."""

    frames: np.ndarray
    fps: float | None = None

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise InvalidInput(f"frames must be T x H x W x 3, got {arr.shape}")
        if arr.shape[0] < 2:
            raise InvalidInput("a frame sequence needs at least 2 frames")
        if arr.shape[1] < MIN_SIDE or arr.shape[2] < MIN_SIDE:
            raise InvalidInput(f"frames must be at least {MIN_SIDE}x{MIN_SIDE}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInput("frames contain non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidInput("frame values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self) -> int:
        return self.T

    def __getitem__(self, index):
        return self.frames[index]

    def t_norm(self, index):
        return np.asarray(index, dtype=np.float64) / (self.T - 1)

    def subsequence(self, start: int, stop: int) -> "FrameSequence":
        return FrameSequence(self.frames[start:stop], fps=self.fps)


@dataclass(frozen=True, eq=False)
class RasterCanvas:
    """A raster view of the canonical domain.

    Pixel ``(i, j)`` (row, column) has its center at canonical coordinates
    ``(origin_uv[0] + j * scale, origin_uv[1] + i * scale)``.
    """

    pixels: np.ndarray
    origin_uv: tuple[float, float]
    scale: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3, 4):
            raise InvalidInput(f"canvas must be H x W x C with C in {{1,3,4}}, got {px.shape}")
        if not self.scale > 0:
            raise InvalidInput("canvas scale must be positive")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "origin_uv", (float(self.origin_uv[0]), float(self.origin_uv[1])))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def geometry(self) -> tuple[float, float, float, int, int]:
        return (*self.origin_uv, self.scale, self.height, self.width)

    def same_geometry(self, other: "RasterCanvas") -> bool:
        return self.geometry == other.geometry

    def with_pixels(self, pixels) -> "RasterCanvas":
        return RasterCanvas(pixels, self.origin_uv, self.scale, dict(self.meta))

    def grid_uv(self) -> tuple[np.ndarray, np.ndarray]:
        """Canonical coordinates of every pixel center, each ``H_c x W_c``."""
        u = self.origin_uv[0] + np.arange(self.width) * self.scale
        v = self.origin_uv[1] + np.arange(self.height) * self.scale
        return np.meshgrid(u, v)

    def uv_to_pixel(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (column, row) raster coordinates of canonical points."""
        return (
            (np.asarray(u) - self.origin_uv[0]) / self.scale,
            (np.asarray(v) - self.origin_uv[1]) / self.scale,
        )


def pixel_grid_uv(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pixel-center coordinates ``(u, v)`` of an ``H x W`` frame."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    return np.meshgrid(u, v)


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DecodeFailure(f"cannot decode image {path}: {exc}") from exc
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


def _write_image(path: Path, pixels: np.ndarray) -> None:
    data = _to_uint8(pixels)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # temp-then-rename so readers never see a torn file
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.png")
        os.close(fd)
        Image.fromarray(data).save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_frames(directory_path, pattern: str = "*.png", fps: float | None = None) -> FrameSequence:
    """Load every image matching ``pattern``, sorted by filename."""
    directory = Path(directory_path)
    if not directory.is_dir():
        raise EmptyDirectory(f"frame directory does not exist: {directory}")
    files = sorted(p for p in directory.glob(pattern) if p.is_file())
    if len(files) < 2:
        raise EmptyDirectory(f"need at least 2 frames matching {pattern!r} in {directory}, found {len(files)}")
    frames = []
    shape = None
    for path in files:
        img = _read_image(path)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        img = img[:, :, :3]
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DimensionMismatch(f"{path} has shape {img.shape[:2]}, expected {shape[:2]}")
        frames.append(img)
    return FrameSequence(np.stack(frames), fps=fps)


def save_frames(seq: FrameSequence, directory_path) -> list[Path]:
    directory = Path(directory_path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {directory}: {exc}") from exc
    if not os.access(directory, os.W_OK):
        raise IoFailure(f"directory is not writable: {directory}")
    paths = []
    for t in range(seq.T):
        path = directory / f"frame_{t:05d}.png"
        _write_image(path, seq.frames[t])
        paths.append(path)
    return paths


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".canonical.json")


def write_json_atomic(path, payload, **dump_kwargs) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.json")
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, **dump_kwargs)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def export_canonical(canvas: RasterCanvas, path) -> Path:
    """Write ``canvas`` as an 8-bit PNG plus its ``<name>.canonical.json`` sidecar."""
    if canvas.channels not in (3, 4):
        raise InvalidInput("only RGB or RGBA canvases can be exported")
    path = Path(path)
    _write_image(path, canvas.pixels)
    manifest = {
        "origin_u": canvas.origin_uv[0],
        "origin_v": canvas.origin_uv[1],
        "scale": canvas.scale,
        "height": canvas.height,
        "width": canvas.width,
    }
    write_json_atomic(sidecar_path(path), manifest, indent=2)
    return path


def import_canonical(path, origin_uv=None, scale=None) -> RasterCanvas:
    """Read a canonical raster; geometry comes from the sidecar unless given."""
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"no such canonical image: {path}")
    pixels = _read_image(path)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    side = sidecar_path(path)
    if origin_uv is None or scale is None:
        if not side.is_file():
            raise ManifestMissing(f"{path} has no sidecar {side.name} and no explicit origin/scale")
        try:
            manifest = json.loads(side.read_text())
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot read sidecar {side}: {exc}") from exc
        if (manifest["height"], manifest["width"]) != pixels.shape[:2]:
            raise DimensionMismatch(
                f"{path} is {pixels.shape[:2]} but its sidecar records "
                f"{(manifest['height'], manifest['width'])}"
            )
        if origin_uv is None:
            origin_uv = (manifest["origin_u"], manifest["origin_v"])
        if scale is None:
            scale = manifest["scale"]
    return RasterCanvas(pixels, tuple(origin_uv), float(scale))


def load_mask(path) -> np.ndarray:
    """Read a 1-channel mask image and threshold it at 0.5."""
    img = _read_image(Path(path))
    if img.ndim == 3:
        img = img[:, :, 0]
    return img >= 0.5


def save_mask(mask: np.ndarray, path) -> None:
    _write_image(Path(path), np.asarray(mask, dtype=np.float64)[:, :, None])
