"""Propagate canonical-space edits and masks to every frame.

The edited canonical raster replaces the canonical network at render time:
each output pixel looks up the raster at its deformed coordinates, so the
deformation is untouched by the edit and identical across edits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .errors import CoverageError, GeometryMismatch, InvalidInput
from .fields import CanvasSpec, NarcanModel, render_canonical_raster
from .frames_io import FrameSequence, RasterCanvas
from .sampling import bilinear, nearest
from .separation import SegmentModelSet, blend_weight

ModelLike = Union[NarcanModel, SegmentModelSet]


@dataclass(frozen=True)
class EditLayer:
    canvas: RasterCanvas
    blend_mode: str = "alpha_over"

    def __post_init__(self):
        if self.canvas.channels != 4:
            raise InvalidInput("edit layers are RGBA")
        a = self.canvas.pixels[..., 3]
        if a.min() < 0 or a.max() > 1:
            raise InvalidInput("edit alpha must lie in [0, 1]")
        if self.blend_mode not in ("alpha_over", "replace"):
            raise InvalidInput(f"unknown blend mode {self.blend_mode!r}")


@dataclass(frozen=True)
class MaskLayer:
    canvas: RasterCanvas

    def __post_init__(self):
        px = self.canvas.pixels
        if px.shape[2] != 1 or not np.all((px == 0) | (px == 1)):
            raise InvalidInput("mask layers are single-channel and binary")

    @classmethod
    def from_array(cls, mask, origin_uv, scale) -> "MaskLayer":
        return cls(RasterCanvas(np.asarray(mask, dtype=np.float64)[..., None], origin_uv, scale))


def composite_edit(base: RasterCanvas, edit: EditLayer) -> RasterCanvas:
    if not base.same_geometry(edit.canvas):
        raise GeometryMismatch(f"edit geometry {edit.canvas.geometry} != canonical {base.geometry}")
    rgb = base.pixels[..., :3]
    top = edit.canvas.pixels[..., :3]
    alpha = edit.canvas.pixels[..., 3:4]
    if edit.blend_mode == "alpha_over":
        out = alpha * top + (1.0 - alpha) * rgb
    else:
        out = np.where(alpha > 0, top, rgb)
    return base.with_pixels(out)


def canvas_spec(canvas: RasterCanvas) -> CanvasSpec:
    return CanvasSpec(canvas.origin_uv, canvas.scale, canvas.height, canvas.width)


def _raster_coords(model: NarcanModel, t: int, canvas: RasterCanvas):
    with torch.no_grad():
        uv = model.deform_frame(t).double().numpy()
    return canvas.uv_to_pixel(uv[..., 0], uv[..., 1])


def _flatten_rgba(model: NarcanModel, canvas: RasterCanvas) -> RasterCanvas:
    """An RGBA canonical is an edit layer over the model's own canonical."""
    if canvas.channels == 3:
        return canvas
    if canvas.channels != 4:
        raise InvalidInput("edited canonical must be RGB or RGBA")
    base = render_canonical_raster(model, canvas_spec(canvas))
    return composite_edit(base, EditLayer(canvas))


def _check_coverage(valid: np.ndarray, t: int) -> None:
    if not valid.all():
        frac = float(1.0 - valid.mean())
        raise CoverageError(f"frame {t}: {frac:.2%} of samples fall outside the edited raster", frame=t, fraction=frac)


def _per_segment(model: ModelLike, canvases) -> tuple[list[NarcanModel], list, object]:
    if isinstance(model, SegmentModelSet):
        items = list(canvases) if isinstance(canvases, Sequence) else [canvases]
        if len(items) != model.plan.k:
            raise InvalidInput(f"need one edited canonical per segment ({model.plan.k}), got {len(items)}")
        return model.models, items, model.plan
    if isinstance(canvases, Sequence):
        raise InvalidInput("a single model takes a single canonical")
    return [model], [canvases], None


def edited_frame(model: NarcanModel, canvas: RasterCanvas, t: int) -> np.ndarray:
    x, y = _raster_coords(model, t, canvas)
    rgb, valid = bilinear(canvas.pixels[..., :3], x, y)
    _check_coverage(valid, t)
    return np.clip(rgb, 0.0, 1.0)


def render_edited_video(model: ModelLike, edited_canonical) -> FrameSequence:
    """Render every frame by looking the edited raster up at ``deform(u, v, t)``.

    For segment sets pass one canonical per segment; each segment is
    rendered with its own canonical and the results are blended.
    """
    models, canvases, plan = _per_segment(model, edited_canonical)
    canvases = [_flatten_rgba(m, c) for m, c in zip(models, canvases)]
    if plan is None:
        return FrameSequence(np.stack([edited_frame(models[0], canvases[0], t) for t in range(models[0].frame_count)]))
    frames = []
    for t in range(plan.T):
        out = None
        for i, alpha in blend_weight(plan, t):
            if alpha == 0.0:
                continue
            frame = edited_frame(models[i], canvases[i], plan.local_index(i, t))
            out = alpha * frame if out is None else out + alpha * frame
        frames.append(np.clip(out, 0.0, 1.0))
    return FrameSequence(np.stack(frames))


def mask_frame(model: NarcanModel, mask: MaskLayer, t: int) -> np.ndarray:
    x, y = _raster_coords(model, t, mask.canvas)
    vals, valid = nearest(mask.canvas.pixels[..., 0], x, y)
    _check_coverage(valid, t)
    return vals >= 0.5


def propagate_mask(model: ModelLike, mask) -> list[np.ndarray]:
    """Nearest-neighbor mask lookup per frame; output masks stay binary.

    Inside overlap windows of a segment set the per-segment masks are
    combined by weighted vote at 0.5.
    """
    models, masks, plan = _per_segment(model, mask)
    masks = [m if isinstance(m, MaskLayer) else MaskLayer(m) for m in masks]
    if plan is None:
        return [mask_frame(models[0], masks[0], t) for t in range(models[0].frame_count)]
    out = []
    for t in range(plan.T):
        vote = 0.0
        for i, alpha in blend_weight(plan, t):
            if alpha > 0.0:
                vote = vote + alpha * mask_frame(models[i], masks[i], plan.local_index(i, t))
        out.append(np.asarray(vote) >= 0.5)
    return out


def square_edit(canvas: RasterCanvas, u_range, v_range, color=(1.0, 0.0, 0.0)) -> EditLayer:
    """Opaque axis-aligned rectangle in canonical coordinates (handy for demos/tests)."""
    uu, vv = canvas.grid_uv()
    inside = (uu >= u_range[0]) & (uu <= u_range[1]) & (vv >= v_range[0]) & (vv <= v_range[1])
    px = np.zeros((canvas.height, canvas.width, 4))
    px[..., :3] = color
    px[..., 3] = inside
    return EditLayer(RasterCanvas(px, canvas.origin_uv, canvas.scale))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)
