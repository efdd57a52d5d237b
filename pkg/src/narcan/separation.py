"""Separated representation: one model per overlapping video segment.

Frames inside the overlap window of segments ``i`` and ``i + 1`` are
reconstructed as a linear blend whose weight moves from segment ``i`` to
segment ``i + 1`` across the window. Canonical images of different segments
are kept stylistically consistent by editing them as one 2x2 grid, and
hand-drawn edits are carried between canonicals by flow warping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InfeasiblePlan, InvalidInput, IoFailure
from .fields import NarcanModel, load_model, read_manifest, render_frame, save_model
from .flow import FlowBackend, FlowField
from .frames_io import FrameSequence, RasterCanvas, write_json_atomic
from .sampling import backward_warp

GRID_CELLS = 4


@dataclass(frozen=True)
class SegmentPlan:
    T: int
    overlap: int
    segments: tuple[tuple[int, int], ...]

    @property
    def k(self) -> int:
        return len(self.segments)

    def to_dict(self) -> dict:
        return {"T": self.T, "k": self.k, "overlap": self.overlap, "segments": [list(s) for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentPlan":
        return cls(int(d["T"]), int(d["overlap"]), tuple((int(a), int(b)) for a, b in d["segments"]))

    def local_index(self, segment: int, t: int) -> int:
        return t - self.segments[segment][0]


def plan_segments(T: int, k: int, overlap: int) -> SegmentPlan:
    """Split ``T`` frames into ``k`` equal segments sharing ``overlap`` frames.

    Segment length solves ``k * L - (k - 1) * overlap = T``; any remainder
    goes to the last segment.
    """
    if k < 1 or overlap < 0 or T < 2:
        raise InfeasiblePlan(f"need k >= 1, overlap >= 0, T >= 2 (got T={T}, k={k}, overlap={overlap})")
    if k == 1:
        return SegmentPlan(T, overlap, ((0, T),))
    length = (T + (k - 1) * overlap) // k
    if length <= overlap or length < 2:
        raise InfeasiblePlan(f"T={T} frames cannot form {k} segments overlapping by {overlap} (length {length})")
    stride = length - overlap
    if k > 2 and stride < overlap:
        # segment i + 2 would start inside segment i, leaving frames with three owners
        raise InfeasiblePlan(f"T={T} frames: overlap {overlap} exceeds the stride {stride} between {k} segments")
    segments = [(i * stride, i * stride + length) for i in range(k)]
    segments[-1] = (segments[-1][0], T)
    return SegmentPlan(T, overlap, tuple(segments))


def blend_weight(plan: SegmentPlan, t: int) -> list[tuple[int, float]]:
    """Segment weights for frame ``t``; they are non-negative and sum to 1."""
    if not 0 <= t < plan.T:
        raise InvalidInput(f"frame {t} outside [0, {plan.T})")
    owners = [i for i, (a, b) in enumerate(plan.segments) if a <= t < b]
    if len(owners) == 1:
        return [(owners[0], 1.0)]
    i, j = owners
    p = t - plan.segments[j][0]
    w = plan.overlap
    alpha = p / (w - 1) if w > 1 else 0.0
    return [(i, 1.0 - alpha), (j, alpha)]


@dataclass
class SegmentModelSet:
    plan: SegmentPlan
    models: list[NarcanModel]

    def __post_init__(self):
        if len(self.models) != self.plan.k:
            raise InvalidInput(f"{len(self.models)} models for a {self.plan.k}-segment plan")
        for m, (a, b) in zip(self.models, self.plan.segments):
            if m.frame_count != b - a:
                raise InvalidInput(f"model covers {m.frame_count} frames, segment [{a}, {b}) has {b - a}")


def render_blended(model_set: SegmentModelSet, t: int) -> np.ndarray:
    out = None
    for i, alpha in blend_weight(model_set.plan, t):
        if alpha == 0.0:
            continue
        frame = render_frame(model_set.models[i], model_set.plan.local_index(i, t))
        if alpha == 1.0:
            return frame
        out = alpha * frame if out is None else out + alpha * frame
    return out


def render_video(model_set: SegmentModelSet) -> FrameSequence:
    return FrameSequence(np.clip(np.stack([render_blended(model_set, t) for t in range(model_set.plan.T)]), 0, 1))


def train_segments(seq: FrameSequence, plan: SegmentPlan, cfg=None, schedule=None, provider=None):
    """Train one model per segment; returns the set and the per-segment reports."""
    from dataclasses import replace

    from .training import TrainConfig, train

    cfg = cfg or TrainConfig()
    models, reports = [], []
    for i, (a, b) in enumerate(plan.segments):
        model, report = train(seq.subsequence(a, b), replace(cfg, seed=cfg.seed + i), schedule, provider)
        models.append(model)
        reports.append(report)
    return SegmentModelSet(plan, models), reports


def save_model_set(model_set: SegmentModelSet, directory, extra: dict | None = None) -> Path:
    """A single segment is stored flat; ``k > 1`` uses ``segment_XX`` subdirectories."""
    directory = Path(directory)
    meta = {"plan": model_set.plan.to_dict(), **(extra or {})}
    if model_set.plan.k == 1:
        return save_model(model_set.models[0], directory, meta)
    names = segment_dir_names(model_set.plan.k)
    for name, model in zip(names, model_set.models):
        save_model(model, directory / name)
    write_set_manifest(directory, model_set.plan, extra)
    return directory


def segment_dir_names(k: int) -> list[str]:
    return [f"segment_{i:02d}" for i in range(k)]


def write_set_manifest(directory, plan: SegmentPlan, extra: dict | None = None) -> None:
    """Top-level manifest of a ``k > 1`` checkpoint; segments live in subdirectories."""
    meta = {"plan": plan.to_dict(), **(extra or {}), "segment_dirs": segment_dir_names(plan.k), "version": 1}
    write_json_atomic(Path(directory) / "manifest.json", meta, indent=2, sort_keys=True)


def load_model_set(directory) -> SegmentModelSet:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if "segment_dirs" in manifest:
        models = [load_model(directory / name) for name in manifest["segment_dirs"]]
        return SegmentModelSet(SegmentPlan.from_dict(manifest["plan"]), models)
    model = load_model(directory)
    plan = SegmentPlan.from_dict(manifest["plan"]) if "plan" in manifest else plan_segments(model.frame_count, 1, 0)
    return SegmentModelSet(plan, [model])


# --- grid trick --------------------------------------------------------------

def grid_concat(canvases: list[RasterCanvas]) -> RasterCanvas:
    """Tile up to four same-size canvases into a 2x2 grid (row-major, empty cells black)."""
    if not 1 <= len(canvases) <= GRID_CELLS:
        raise InvalidInput(f"a grid holds 1 to {GRID_CELLS} canvases, got {len(canvases)}")
    h, w, c = canvases[0].pixels.shape
    for cv in canvases[1:]:
        if cv.pixels.shape != (h, w, c):
            raise DimensionMismatch(f"grid cells must share dimensions: {cv.pixels.shape} vs {(h, w, c)}")
    grid = np.zeros((2 * h, 2 * w, c))
    cells = []
    for idx, cv in enumerate(canvases):
        r, col = divmod(idx, 2)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = cv.pixels
        cells.append({"cell": idx, "row": r, "col": col, "segment": idx, "origin_uv": list(cv.origin_uv), "scale": cv.scale})
    meta = {"grid": {"cell_height": h, "cell_width": w, "cells": cells}}
    return RasterCanvas(grid, (0.0, 0.0), 1.0, meta)


def grid_split(grid: RasterCanvas, k: int, cell_shape: tuple[int, int] | None = None) -> list[RasterCanvas]:
    """Inverse of :func:`grid_concat`; geometry comes from the grid manifest when present."""
    if not 1 <= k <= GRID_CELLS:
        raise InvalidInput(f"a grid holds 1 to {GRID_CELLS} canvases, got k={k}")
    info = grid.meta.get("grid", {})
    if cell_shape is None:
        cell_shape = (info.get("cell_height", grid.height // 2), info.get("cell_width", grid.width // 2))
    h, w = cell_shape
    if grid.height != 2 * h or grid.width != 2 * w:
        raise DimensionMismatch(f"grid {grid.height}x{grid.width} does not hold 2x2 cells of {h}x{w}")
    cells = {c["cell"]: c for c in info.get("cells", [])}
    out = []
    for idx in range(k):
        r, col = divmod(idx, 2)
        cell = cells.get(idx, {"origin_uv": (0.0, 0.0), "scale": 1.0})
        out.append(RasterCanvas(grid.pixels[r * h:(r + 1) * h, col * w:(col + 1) * w].copy(), tuple(cell["origin_uv"]), cell["scale"]))
    return out


def save_grid_manifest(grid: RasterCanvas, path) -> None:
    write_json_atomic(path, grid.meta.get("grid", {}), indent=2)


def load_grid_manifest(path) -> dict:
    try:
        return {"grid": json.loads(Path(path).read_text())}
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read grid manifest {path}: {exc}") from exc


# --- edit transfer between canonicals ----------------------------------------

def flow_between(a: np.ndarray, b: np.ndarray, backend: FlowBackend) -> FlowField:
    """Dense flow ``a -> b`` from the configured backend."""
    return backend(np.asarray(a)[..., :3], np.asarray(b)[..., :3])


def warp_edit(edit: RasterCanvas, flow: FlowField) -> RasterCanvas:
    """Backward-warp an RGBA edit layer onto the flow's grid.

    To carry an edit from canonical ``C_1`` to ``C_k`` pass
    ``flow_between(C_k, C_1)``. Pixels whose flow is invalid or leaves the
    edit raster become fully transparent.
    """
    if edit.channels != 4:
        raise InvalidInput("warp_edit expects an RGBA edit layer")
    if (edit.height, edit.width) != flow.shape:
        raise DimensionMismatch(f"edit {edit.height}x{edit.width} vs flow {flow.shape}")
    out, inb = backward_warp(edit.pixels, flow.to_pixels())
    out[..., 3] = np.where(inb & flow.valid_mask, out[..., 3], 0.0)
    return edit.with_pixels(out)


def cumulative_warp_error(edit: RasterCanvas, n_steps: int, sigma_px: float = 0.3, shift_px: int = 1,
                          trials: int = 16, seed: int = 0, border: int | None = None) -> float:
    """Alignment error after chaining ``n_steps`` noisy flow warps.

    Each step moves the edit by an exact integer shift; the "estimated" flow
    adds i.i.d. Gaussian noise of ``sigma_px`` per pixel. The error is the
    mean absolute difference to the noise-free chain over the interior,
    averaged over ``trials`` noise draws. It grows with ``n_steps``, which
    is why few segments are preferable.
    """
    h, w = edit.height, edit.width
    border = n_steps * shift_px + 4 if border is None else border
    if 2 * border >= min(h, w):
        raise InvalidInput("edit too small for the requested number of steps")
    base = np.zeros((h, w, 2))
    base[..., 0] = shift_px
    ideal = edit.pixels
    for _ in range(n_steps):
        ideal, _ = backward_warp(ideal, base)
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(trials):
        cur = edit.pixels
        for _ in range(n_steps):
            noisy = base + rng.normal(0.0, sigma_px, base.shape)
            cur, _ = backward_warp(cur, noisy)
        errs.append(np.mean(np.abs(cur - ideal)[border:h - border, border:w - border]))
    return float(np.mean(errs))
