from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import set_translation, tiny_model
from narcan.editing import (
    EditLayer,
    MaskLayer,
    composite_edit,
    iou,
    propagate_mask,
    render_edited_video,
    square_edit,
)
from narcan.errors import CoverageError, GeometryMismatch, InvalidInput
from narcan.fields import CanvasSpec, canonical_bounds, matrices_to_params, render_canonical_raster, render_frame
from narcan.frames_io import RasterCanvas
from narcan.metrics import psnr
from narcan.separation import SegmentModelSet, plan_segments
from narcan.synthetic import translation_scene


def _base(h=8, w=8, value=0.0):
    return RasterCanvas(np.full((h, w, 3), value), (0.0, 0.0), 0.1)


def _layer(rgb, alpha, h=8, w=8):
    px = np.zeros((h, w, 4))
    px[..., :3] = rgb
    px[..., 3] = alpha
    return EditLayer(RasterCanvas(px, (0.0, 0.0), 0.1))


def _unit_spec(n=64):
    # pixel centers from -0.1 to 1.1, comfortably covering [0, 1]^2
    return CanvasSpec((-0.1, -0.1), 1.2 / (n - 1), n, n)


def test_composite_transparent_opaque_half():
    base = RasterCanvas(np.random.default_rng(0).uniform(size=(8, 8, 3)), (0.0, 0.0), 0.1)
    assert np.array_equal(composite_edit(base, _layer(1.0, 0.0)).pixels, base.pixels)
    assert np.array_equal(composite_edit(base, _layer(0.3, 1.0)).pixels, np.full((8, 8, 3), 0.3))
    assert np.allclose(composite_edit(_base(), _layer(1.0, 0.5)).pixels, 0.5)
    replaced = composite_edit(_base(), EditLayer(_layer(1.0, 0.5).canvas, "replace"))
    assert np.all(replaced.pixels == 1.0)


def test_composite_errors():
    with pytest.raises(GeometryMismatch):
        composite_edit(RasterCanvas(np.zeros((8, 8, 3)), (0.5, 0.0), 0.1), _layer(1.0, 1.0))
    with pytest.raises(InvalidInput):
        EditLayer(_base())
    with pytest.raises(InvalidInput):
        EditLayer(_layer(1.0, 1.0).canvas, "multiply")
    with pytest.raises(InvalidInput):
        MaskLayer(RasterCanvas(np.full((8, 8, 1), 0.5), (0, 0), 0.1))


def test_unedited_raster_reproduces_frames():
    model = tiny_model(T=3, h=16, w=16)
    spec = CanvasSpec.from_bounds(canonical_bounds(model, margin=0.02), 256)
    video = render_edited_video(model, render_canonical_raster(model, spec))
    ref = np.stack([render_frame(model, t) for t in range(3)])
    assert psnr(video.frames, np.clip(ref, 0, 1)) >= 40.0


def _red_pixels(frame):
    return (frame[..., 0] > 0.9) & (frame[..., 1] < 0.1) & (frame[..., 2] < 0.1)


def test_red_square_identity_model_is_static():
    model = tiny_model(T=4, h=32, w=32)
    base = render_canonical_raster(model, _unit_spec())
    edited = composite_edit(base, square_edit(base, (0.4, 0.6), (0.4, 0.6)))
    frames = render_edited_video(model, edited).frames
    masks = [_red_pixels(f) for f in frames]
    assert masks[0].sum() > 0
    assert all(np.array_equal(masks[0], m) for m in masks)
    ys, xs = np.nonzero(masks[0])
    # pixel centers (x+0.5)/32 inside [0.4, 0.6] -> columns 13..18
    assert (xs.min(), xs.max(), ys.min(), ys.max()) == (13, 18, 13, 18)


def test_red_square_follows_translation():
    model = tiny_model(T=5, h=32, w=32)
    set_translation(model, 0.01)
    base = render_canonical_raster(model, _unit_spec())
    edited = composite_edit(base, square_edit(base, (0.4, 0.6), (0.4, 0.6)))
    frames = render_edited_video(model, edited).frames
    for t, f in enumerate(frames):
        xs = np.nonzero(_red_pixels(f))[1]
        # canonical u = frame u + 0.01 t, so the square sits at [0.4, 0.6] - 0.01 t
        lo = (0.4 - 0.01 * t) * 32 - 0.5
        hi = (0.6 - 0.01 * t) * 32 - 0.5
        assert abs(xs.min() - np.ceil(lo)) <= 1 and abs(xs.max() - np.floor(hi)) <= 1


def test_coverage_error_reports_frame():
    model = tiny_model(T=3, h=16, w=16)
    set_translation(model, 0.2)
    small = render_canonical_raster(model, CanvasSpec((0.0, 0.0), 1 / 15, 16, 16))
    with pytest.raises(CoverageError) as info:
        render_edited_video(model, small)
    assert info.value.frame == 1
    assert 0 < info.value.fraction < 1


def test_edit_locality():
    model = tiny_model(T=3, h=16, w=16)
    set_translation(model, 0.02)
    base = render_canonical_raster(model, _unit_spec(97))
    layer = square_edit(base, (0.3, 0.5), (0.3, 0.5))
    plain = render_edited_video(model, base).frames
    edited = render_edited_video(model, composite_edit(base, layer)).frames
    u = (np.arange(16) + 0.5) / 16
    for t in range(3):
        cu = u + 0.02 * t
        far_u = (cu < 0.3 - 0.03) | (cu > 0.5 + 0.03)
        far_v = (u < 0.3 - 0.03) | (u > 0.5 + 0.03)
        far = far_v[:, None] | far_u[None, :]
        assert np.array_equal(plain[t][far], edited[t][far])
        assert not np.array_equal(plain[t], edited[t])


def test_rgba_canonical_is_composited_over_model():
    model = tiny_model(T=2, h=16, w=16)
    base = render_canonical_raster(model, _unit_spec())
    layer = square_edit(base, (0.4, 0.6), (0.4, 0.6))
    a = render_edited_video(model, layer.canvas).frames
    b = render_edited_video(model, composite_edit(base, layer)).frames
    assert np.allclose(a, b, atol=1e-12)


def test_mask_all_ones_and_identity_disk():
    model = tiny_model(T=3, h=16, w=16)
    spec = _unit_spec()
    ones = MaskLayer.from_array(np.ones((spec.height, spec.width)), spec.origin_uv, spec.scale)
    assert all(m.all() for m in propagate_mask(model, ones))
    uu, vv = spec.grid_uv()
    disk = (uu - 0.5) ** 2 + (vv - 0.5) ** 2 < 0.3 ** 2
    masks = propagate_mask(model, MaskLayer.from_array(disk, spec.origin_uv, spec.scale))
    assert all(np.array_equal(masks[0], m) for m in masks)
    assert all(m.dtype == bool for m in masks)
    u = (np.arange(16) + 0.5) / 16
    expected = (u[None, :] - 0.5) ** 2 + (u[:, None] - 0.5) ** 2 < 0.3 ** 2
    assert iou(masks[0], expected) >= 0.9


def test_mask_translation_matches_generator():
    scene = translation_scene(T=8, size=32, step_u=0.01)
    model = tiny_model(T=8, h=32, w=32)
    with torch.no_grad():
        model.homography.params.copy_(torch.as_tensor(matrices_to_params(scene.homographies)))
    spec = CanvasSpec.from_bounds(scene.bounds(0.02), 128)
    gt = MaskLayer.from_array(scene.gt_canonical_mask(spec), spec.origin_uv, spec.scale)
    for t, m in enumerate(propagate_mask(model, gt)):
        assert iou(m, scene.masks[t]) >= 0.95


def test_segment_set_inputs():
    plan = plan_segments(6, 2, 2)
    mset = SegmentModelSet(plan, [tiny_model(T=b - a, h=16, w=16, seed=i) for i, (a, b) in enumerate(plan.segments)])
    spec = _unit_spec()
    rasters = [render_canonical_raster(m, spec) for m in mset.models]
    assert render_edited_video(mset, rasters).T == 6
    with pytest.raises(InvalidInput):
        render_edited_video(mset, rasters[:1])
    with pytest.raises(InvalidInput):
        render_edited_video(mset.models[0], rasters)
    ones = MaskLayer.from_array(np.ones((spec.height, spec.width)), spec.origin_uv, spec.scale)
    assert len(propagate_mask(mset, [ones, ones])) == 6


def test_iou_edge_cases():
    z = np.zeros((4, 4), bool)
    assert iou(z, z) == 1.0
    o = np.ones((4, 4), bool)
    assert iou(o, z) == 0.0
