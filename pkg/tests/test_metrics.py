from __future__ import annotations

import json

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from narcan.errors import LowCoverageError, ShapeMismatch
from narcan.flow import BlockMatchingFlow, FunctionFlow, ZeroFlow, translation_flow
from narcan.frames_io import FrameSequence
from narcan.metrics import (
    PSNR_CAP,
    consistency_report,
    interp_error,
    occlusion_mask,
    psnr,
    ssim,
    warp_error_long,
    warp_error_short,
)
from narcan.synthetic import make_scene, static_video, texture_image, translating_video


@pytest.mark.parametrize("backend", [ZeroFlow(), BlockMatchingFlow(patch=8, radius=3)])
def test_static_video_is_exactly_zero(backend):
    video = static_video(T=4, size=24)
    assert warp_error_short(video, backend) == 0.0
    assert warp_error_long(video, backend) == 0.0
    assert interp_error(video, backend) == 0.0


def test_translating_video_with_exact_flow():
    video = translating_video(T=6, size=48, shift_px=(2, 0))
    flow = translation_flow((2, 0))
    assert warp_error_short(video, flow) <= 1e-4
    assert warp_error_long(video, flow) <= 1e-4
    assert interp_error(video, flow) <= 1.0


def test_translating_video_with_block_matching():
    video = translating_video(T=4, size=40, shift_px=(2, 0))
    assert warp_error_short(video, BlockMatchingFlow(radius=4)) <= 1e-4


def test_independent_noise_frames():
    rng = np.random.default_rng(3)
    frames = rng.uniform(0, 1, (2, 128, 128, 3))
    # E[(a - b)^2] for independent U(0, 1) is 2 * 1/12
    assert warp_error_short(frames, ZeroFlow()) == pytest.approx(1 / 6, rel=0.02)
    sim = np.mean((rng.uniform(size=10**6) - rng.uniform(size=10**6)) ** 2)
    assert sim == pytest.approx(1 / 6, rel=0.01)


def _two_scene_video():
    a = make_scene(2, 48, 0).frames.frames
    b = make_scene(2, 48, 3).frames.frames
    return np.concatenate([a, b])


def test_different_scene_low_coverage():
    video = _two_scene_video()
    with pytest.raises(LowCoverageError) as info:
        warp_error_long(video, BlockMatchingFlow())
    assert min(info.value.coverage) < 0.2
    report = consistency_report(video, BlockMatchingFlow())
    assert "long_warp_low_coverage" in report.flags
    assert np.isfinite(report.long_warp)


def test_cross_fade_interp_zero():
    # dyadic pixel values and weights keep every product and average exact in binary
    a = np.round(texture_image(16, 16, 0) * 64) / 64
    b = np.round(texture_image(16, 16, 1) * 64) / 64
    s = np.linspace(0, 1, 5)[:, None, None, None]
    assert interp_error((1 - s) * a + s * b, ZeroFlow()) == 0.0


def test_interp_needs_three_frames():
    with pytest.raises(ShapeMismatch):
        interp_error(np.zeros((2, 8, 8, 3)), ZeroFlow())


def test_occlusion_mask_rejects_inconsistent_flow():
    h = w = 8
    fw = translation_flow((1, 0))(np.zeros((h, w, 3)), np.zeros((h, w, 3)), 0, 1)
    good = translation_flow((1, 0))(np.zeros((h, w, 3)), np.zeros((h, w, 3)), 1, 0)
    bad = ZeroFlow()(np.zeros((h, w, 3)), np.zeros((h, w, 3)))
    assert occlusion_mask(fw, good)[:, 1:].all()
    assert not occlusion_mask(fw, good)[:, 0].any()  # leaves the image
    assert not occlusion_mask(fw, bad).any()


def test_psnr_examples(rng):
    img = rng.uniform(0.2, 0.8, (16, 16, 3))
    assert psnr(img, img) == PSNR_CAP
    assert psnr(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) == 0.0
    assert psnr(img, img + 0.1) == pytest.approx(20.0, abs=1e-9)
    other = rng.uniform(size=img.shape)
    assert psnr(img, other) == psnr(other, img)


def test_psnr_sequence_averages_frames():
    a = np.zeros((2, 8, 8, 3))
    b = a.copy()
    b[1] = 0.1
    assert psnr(FrameSequence(a), FrameSequence(b)) == pytest.approx((PSNR_CAP + 20.0) / 2)


def test_ssim_matches_skimage(rng):
    a = texture_image(32, 32, 0)
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    ref = structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    # skimage averages over a border-cropped map as well; agreement is close but cropping differs slightly
    assert ssim(a, b) == pytest.approx(ref, abs=0.01)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_channel_permutation_invariance(rng):
    a = rng.uniform(size=(2, 16, 16, 3))
    b = rng.uniform(size=(2, 16, 16, 3))
    perm = [2, 0, 1]
    assert psnr(a[..., perm], b[..., perm]) == pytest.approx(psnr(a, b), abs=1e-12)
    assert ssim(a[..., perm], b[..., perm]) == pytest.approx(ssim(a, b), abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))


def test_report_json_and_csv(tmp_path):
    video = translating_video(T=5, size=32, shift_px=(2, 0))
    report = consistency_report(video, translation_flow((2, 0)), against=video)
    data = json.loads(report.to_json())
    assert set(data) >= {"short_warp", "long_warp", "interp_error", "psnr", "ssim", "flags", "per_frame"}
    assert data["psnr"] == PSNR_CAP and data["ssim"] == pytest.approx(1.0)
    report.write_csv(tmp_path / "pf.csv")
    rows = (tmp_path / "pf.csv").read_text().splitlines()
    assert len(rows) == 1 + 5
    assert rows[0].split(",")[0] == "frame"


def test_report_undefined_flags():
    flat = np.full((3, 16, 16, 3), 0.5)
    flat[1] = 0.2
    never = FunctionFlow(lambda s, d, h, w: (np.zeros((h, w, 2)), np.zeros((h, w), bool)))
    report = consistency_report(flat, never)
    assert {"short_warp_undefined", "interp_error_undefined"} <= set(report.flags)
    assert report.short_warp == 0.0 and np.isfinite(report.long_warp)


def test_metrics_are_deterministic():
    video = translating_video(T=4, size=32, shift_px=(1, 1))
    a = consistency_report(video, BlockMatchingFlow(radius=3))
    b = consistency_report(video, BlockMatchingFlow(radius=3))
    assert a.to_json() == b.to_json()
