from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from conftest import TINY, set_constant_color, set_residual_bias, set_translation, tiny_model
from narcan.errors import DegenerateHomography, InvalidInput
from narcan.fields import (
    BOUNDARY_SAMPLES,
    CanvasSpec,
    FieldConfig,
    HomographyTrajectory,
    NarcanModel,
    PositionalEncoding,
    apply_homography,
    boundary_uv,
    canonical_bounds,
    deform,
    load_model,
    params_to_matrices,
    render_canonical_raster,
    render_frame,
    save_model,
)
from narcan.frames_io import RasterCanvas
from narcan.metrics import psnr
from narcan.sampling import bilinear
from narcan.synthetic import homography_apply


def _traj(params) -> HomographyTrajectory:
    return HomographyTrajectory(1, torch.as_tensor(np.asarray(params, dtype=np.float32)[None]))


def test_identity_homography():
    traj = HomographyTrajectory(4)
    assert apply_homography(traj, 0.3, 0.7, 2) == pytest.approx((0.3, 0.7), abs=1e-12)


def test_translation_homography():
    traj = _traj([1, 0, 0.1, 0, 1, -0.05, 0, 0])
    assert apply_homography(traj, 0.5, 0.5, 0) == pytest.approx((0.6, 0.45), abs=1e-7)


def test_apply_then_inverse_matrix(rng):
    for _ in range(20):
        p = np.array([1, 0, 0, 0, 1, 0, 0, 0]) + rng.normal(0, 0.1, 8)
        traj = _traj(p)
        mat = np.append(traj.params.detach().double().numpy()[0], 1.0).reshape(3, 3)
        u, v = rng.uniform(0, 1, 2)
        uh, vh = apply_homography(traj, u, v, 0)
        back = homography_apply(np.linalg.inv(mat), np.array(uh), np.array(vh))
        assert abs(float(back[0]) - u) < 1e-9 and abs(float(back[1]) - v) < 1e-9


def test_degenerate_denominator():
    traj = _traj([1, 0, 0, 0, 1, 0, -2.0, 0])
    with pytest.raises(DegenerateHomography):
        apply_homography(traj, 0.5, 0.3, 0)
    with pytest.raises(DegenerateHomography):
        traj(torch.tensor([[0.5, 0.3]]), torch.tensor([0]))


def test_singular_matrix_detected():
    traj = _traj([1, 1, 0, 1, 1, 0, 0, 0])
    with pytest.raises(DegenerateHomography):
        traj.check_invertible()


def test_frame_index_range():
    traj = HomographyTrajectory(2)
    with pytest.raises(InvalidInput):
        apply_homography(traj, 0.5, 0.5, 2)
    with pytest.raises(InvalidInput):
        tiny_model(T=2).render(5)


def test_fresh_model_deform_is_identity(rng):
    model = tiny_model()
    u, v = rng.uniform(0, 1, (2, 50))
    out = deform(model, u, v, 1).detach().double().numpy()
    assert np.allclose(out, np.stack([u, v], -1), atol=1e-7)


def test_additive_residual():
    model = tiny_model()
    set_residual_bias(model, 0.01, 0.0)
    out = deform(model, 0.2, 0.2, 0).detach().double().numpy()
    assert out == pytest.approx([0.21, 0.20], abs=1e-7)


def test_zero_residual_property_exact(rng):
    model = tiny_model(T=3)
    with torch.no_grad():
        model.homography.params.add_(torch.as_tensor(rng.normal(0, 0.02, (3, 8)), dtype=torch.float32))
    uv = torch.as_tensor(rng.uniform(0, 1, (64, 2)), dtype=torch.float32)
    t = torch.as_tensor(rng.integers(0, 3, 64))
    assert torch.equal(model.deform(uv, t), model.homography(uv, t) + 0.0)
    assert torch.equal(model.residual(uv, model.t_norm(t)), torch.zeros(64, 2))


def test_fd_jacobian_wrt_h13(rng):
    model = tiny_model().double()
    with torch.no_grad():
        model.homography.params.add_(torch.as_tensor(rng.normal(0, 0.05, (3, 8))))
    eps = 1e-6
    for _ in range(5):
        u, v = rng.uniform(0, 1, 2)
        with torch.no_grad():
            model.homography.params[1, 2] += eps
            plus = deform(model, u, v, 1).numpy()
            model.homography.params[1, 2] -= 2 * eps
            minus = deform(model, u, v, 1).numpy()
            model.homography.params[1, 2] += eps
        hp = model.homography.params.detach()
        w = float(hp[1, 6] * u + hp[1, 7] * v + 1)
        jac = (plus - minus) / (2 * eps)
        # (1/w, 0); with h31, h32 ~ 0 this is close to (1, 0)
        assert jac == pytest.approx([1 / w, 0.0], abs=1e-4)


def test_fd_jacobian_identity_is_unit():
    model = tiny_model().double()
    eps = 1e-6
    with torch.no_grad():
        model.homography.params[0, 2] += eps
        plus = deform(model, 0.3, 0.6, 0).numpy()
        model.homography.params[0, 2] -= 2 * eps
        minus = deform(model, 0.3, 0.6, 0).numpy()
    assert (plus - minus) / (2 * eps) == pytest.approx([1.0, 0.0], abs=1e-4)


def test_gradient_check_render_16x16(rng):
    torch.manual_seed(0)
    model = NarcanModel(2, 16, 16, TINY, seed=3).double()
    with torch.no_grad():
        model.homography.params.add_(torch.as_tensor(rng.normal(0, 0.02, (2, 8))))
        for p in model.residual.parameters():
            p.add_(torch.as_tensor(rng.normal(0, 0.05, tuple(p.shape))))

    def loss():
        return (model.render(1) ** 2).sum()

    model.zero_grad()
    loss().backward()
    params = [model.homography.params, *model.residual.parameters(), *model.canonical.parameters()]
    eps = 1e-6
    checked = 0
    for p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + eps
                lp = float(loss())
                flat[idx] = orig - eps
                lm = float(loss())
                flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = float(grad[idx])
            if max(abs(fd), abs(an)) < 1e-6:
                continue
            assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3
            checked += 1
    assert checked > 10


def test_homography_group_property(rng):
    a = np.eye(3) + np.pad(rng.normal(0, 0.05, 8), (0, 1)).reshape(3, 3)
    b = np.eye(3) + np.pad(rng.normal(0, 0.05, 8), (0, 1)).reshape(3, 3)
    a /= a[2, 2]
    b /= b[2, 2]
    u, v = rng.uniform(0, 1, (2, 100))
    twice = homography_apply(a, *homography_apply(b, u, v))
    ab = a @ b
    once = homography_apply(ab / ab[2, 2], u, v)
    assert np.max(np.abs(np.stack(twice) - np.stack(once))) < 1e-9


def test_params_to_matrices_has_unit_corner():
    mats = params_to_matrices(torch.zeros(3, 8))
    assert torch.all(mats[:, 2, 2] == 1)


def test_positional_encoding_layout():
    pe = PositionalEncoding(2)
    x = torch.tensor([[0.25]])
    out = pe(x)[0]
    expect = [0.25, np.sin(np.pi * 0.25), np.sin(2 * np.pi * 0.25), np.cos(np.pi * 0.25), np.cos(2 * np.pi * 0.25)]
    assert pe.out_dim(1) == 5
    assert sorted(out.tolist()) == pytest.approx(sorted(expect), abs=1e-6)


def test_default_architecture():
    cfg = FieldConfig()
    assert cfg.layers_g == (256,) * 4 and cfg.layers_f == (256,) * 5
    assert (cfg.pe_freqs_spatial, cfg.pe_freqs_time, cfg.pe_freqs_canonical) == (8, 4, 10)
    model = NarcanModel(2, 8, 8)
    n_g = len([m for m in model.residual.modules() if isinstance(m, torch.nn.Linear)])
    n_f = len([m for m in model.canonical.modules() if isinstance(m, torch.nn.Linear)])
    assert (n_g, n_f) == (5, 6)


def test_constant_gray_render():
    model = tiny_model()
    set_constant_color(model, [0.0, 0.0, 0.0])
    set_residual_bias(model, 0.3, -0.2)
    assert np.allclose(render_frame(model, 2), 0.5)


def test_renders_are_time_independent_without_motion():
    model = tiny_model(T=4)
    assert np.array_equal(render_frame(model, 0), render_frame(model, 3))


def test_render_stays_in_unit_range(rng):
    model = tiny_model()
    with torch.no_grad():
        for p in model.canonical.parameters():
            p.mul_(50.0)
    img = render_frame(model, 0)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_fit_canonical_alone_reproduces_image():
    from narcan.synthetic import texture_image

    torch.manual_seed(0)
    target = texture_image(16, 16, seed=2, smooth=1.5)
    model = NarcanModel(2, 16, 16, FieldConfig(layers_g=(8,), layers_f=(64, 64, 64), pe_freqs_canonical=4), seed=0)
    opt = torch.optim.Adam(model.canonical.parameters(), lr=3e-3)
    tgt = torch.as_tensor(target, dtype=torch.float32)
    for _ in range(1500):
        opt.zero_grad()
        loss = torch.mean((model.render(0) - tgt) ** 2)
        loss.backward()
        opt.step()
    assert psnr(render_frame(model, 0), target) > 40


def test_constant_red_canvas():
    model = tiny_model()
    set_constant_color(model, [40.0, -40.0, -40.0])
    canvas = render_canonical_raster(model, CanvasSpec((0.0, 0.0), 0.1, 8, 9))
    assert canvas.pixels.shape == (8, 9, 3)
    assert np.allclose(canvas.pixels, [1.0, 0.0, 0.0], atol=1e-12)
    assert canvas.origin_uv == (0.0, 0.0) and canvas.scale == 0.1


def test_identity_bounds_and_canvas():
    model = NarcanModel(2, 96, 96, TINY)
    bounds = canonical_bounds(model)
    assert bounds == pytest.approx((0.5 / 96, 0.5 / 96, 95.5 / 96, 95.5 / 96), abs=1e-7)
    spec = CanvasSpec.from_bounds(bounds, 96)
    uu, vv = spec.grid_uv()
    assert (uu.min(), vv.max()) == pytest.approx((0.5 / 96, 95.5 / 96), abs=1e-7)
    grown = canonical_bounds(model, 0.05)
    assert np.allclose(np.array(grown) - np.array(bounds), [-0.05, -0.05, 0.05, 0.05])


def test_translated_bounds():
    base = canonical_bounds(NarcanModel(2, 96, 96, TINY))
    model = NarcanModel(2, 96, 96, TINY)
    with torch.no_grad():
        model.homography.params[1, 2] = 0.1
    assert canonical_bounds(model)[2] - base[2] == pytest.approx(0.1, abs=1e-6)


def test_boundary_sample_count():
    pts = boundary_uv(10, 20)
    assert len(pts) == BOUNDARY_SAMPLES == 65
    assert np.allclose(pts[0], pts[-1])


def test_negative_margin_rejected():
    with pytest.raises(InvalidInput):
        canonical_bounds(tiny_model(), -0.1)


def test_canvas_resampling_matches_render():
    model = tiny_model(h=16, w=16)
    # canvas nodes coincide with pixel centers: bilinear lookup hits nodes exactly
    spec = CanvasSpec.from_bounds(canonical_bounds(model), 16)
    canvas = render_canonical_raster(model, spec)
    x, y = canvas.uv_to_pixel(*np.meshgrid((np.arange(16) + 0.5) / 16, (np.arange(16) + 0.5) / 16))
    vals, ok = bilinear(canvas.pixels, x, y)
    assert ok.all()
    assert np.max(np.abs(vals - render_frame(model, 0))) < 1e-5
    # a finer canvas differs only by interpolation error
    fine = render_canonical_raster(model, CanvasSpec.from_bounds(canonical_bounds(model), 64))
    vals, ok = bilinear(fine.pixels, *fine.uv_to_pixel(*np.meshgrid((np.arange(16) + 0.5) / 16, (np.arange(16) + 0.5) / 16)))
    assert ok.all() and psnr(vals, render_frame(model, 0)) > 35


def test_canvas_spec_covering_contains_bounds():
    spec = CanvasSpec.covering((0.1, 0.2, 0.5, 0.3), 16, 16)
    uu, vv = spec.grid_uv()
    assert uu.min() <= 0.1 + 1e-12 and uu.max() >= 0.5 - 1e-12
    assert vv.min() <= 0.2 and vv.max() >= 0.3


def test_checkpoint_roundtrip(tmp_path, rng):
    model = tiny_model(T=3)
    with torch.no_grad():
        model.homography.params.add_(torch.as_tensor(rng.normal(0, 0.02, (3, 8)), dtype=torch.float32))
        for p in model.residual.parameters():
            p.add_(0.01)
    save_model(model, tmp_path, {"note": "x"})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("T", "H", "W", "pe_freqs_spatial", "pe_freqs_time", "pe_freqs_canonical", "layers_g", "layers_f", "version"):
        assert key in manifest
    assert manifest["note"] == "x"
    h = np.fromfile(tmp_path / "homography.bin", dtype="<f4")
    assert h.shape == (24,)
    assert np.array_equal(h.reshape(3, 8), model.homography.params.detach().numpy())
    # first residual layer weight is stored first, row-major
    first = [m for m in model.residual.modules() if isinstance(m, torch.nn.Linear)][0]
    r = np.fromfile(tmp_path / "residual.bin", dtype="<f4")
    assert np.array_equal(r[: first.weight.numel()], first.weight.detach().numpy().ravel())
    back = load_model(tmp_path)
    for t in range(3):
        assert np.array_equal(render_frame(back, t), render_frame(model, t))


def test_translation_model_moves_content():
    model = tiny_model(T=3)
    set_translation(model, 0.1)
    out = model.deform_frame(2).detach().numpy()
    base = tiny_model(T=3).deform_frame(2).detach().numpy()
    assert np.allclose(out[..., 0] - base[..., 0], 0.2, atol=1e-6)
