"""Temporal-consistency and fidelity metrics.

Pinned definitions:

* warping error: occlusion-masked MSE on the [0, 1] scale between frame
  ``a`` and frame ``b`` backward-warped onto ``a`` with ``flow(a -> b)``.
  The mask keeps pixels whose warp stays inside the image and whose
  forward-backward flow round trip returns within 0.01 normalized units.
  Short-term uses consecutive pairs; long-term anchors every frame to
  frame 0.
* interpolation error: RMSE on the 0-255 scale between frame ``t`` and the
  average of its two neighbors warped onto it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import LowCoverageError, ShapeMismatch
from .flow import FlowBackend, FlowField
from .frames_io import FrameSequence
from .sampling import bilinear, nearest

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
OCCLUSION_THRESHOLD = 0.01
MIN_COVERAGE = 0.2


def _frames(video) -> np.ndarray:
    return video.frames if isinstance(video, FrameSequence) else np.asarray(video, dtype=np.float64)


def occlusion_mask(fw: FlowField, bw: FlowField, threshold: float = OCCLUSION_THRESHOLD) -> np.ndarray:
    """Pixels of the source grid whose forward-backward round trip is consistent."""
    h, w = fw.shape
    px = fw.to_pixels()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = xs + px[..., 0], ys + px[..., 1]
    bw_at, inb = bilinear(bw.flow, tx, ty)
    bw_ok, _ = nearest(bw.valid_mask, tx, ty)
    err = np.linalg.norm(fw.flow + bw_at, axis=-1)
    return fw.valid_mask & inb & bw_ok & (err < threshold)


@dataclass(frozen=True)
class PairError:
    src: int
    dst: int
    mse: float  # nan when the mask is empty
    coverage: float


def pair_warp_error(frames: np.ndarray, src: int, dst: int, backend: FlowBackend,
                    threshold: float = OCCLUSION_THRESHOLD) -> PairError:
    a, b = frames[src], frames[dst]
    fw = backend(a, b, src, dst)
    bw = backend(b, a, dst, src)
    warped, inb = fw.warp(b)
    mask = occlusion_mask(fw, bw, threshold) & inb
    coverage = float(mask.mean())
    if not mask.any():
        return PairError(src, dst, float("nan"), 0.0)
    mse = float(np.mean((a[mask] - warped[mask]) ** 2))
    return PairError(src, dst, mse, coverage)


def _mean_finite(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def short_pairs(video, backend: FlowBackend, threshold: float = OCCLUSION_THRESHOLD) -> list[PairError]:
    frames = _frames(video)
    return [pair_warp_error(frames, t, t + 1, backend, threshold) for t in range(len(frames) - 1)]


def long_pairs(video, backend: FlowBackend, threshold: float = OCCLUSION_THRESHOLD) -> list[PairError]:
    frames = _frames(video)
    return [pair_warp_error(frames, 0, t, backend, threshold) for t in range(1, len(frames))]


def warp_error_short(video, flow_backend: FlowBackend, threshold: float = OCCLUSION_THRESHOLD) -> float:
    """Mean masked MSE over consecutive pairs; pairs with an empty mask (e.g.
    a shot cut) are skipped."""
    return _mean_finite(p.mse for p in short_pairs(video, flow_backend, threshold))


def warp_error_long(video, flow_backend: FlowBackend, threshold: float = OCCLUSION_THRESHOLD,
                    min_coverage: float = MIN_COVERAGE) -> float:
    """Mean masked MSE between frame 0 and every later frame.

    Raises :class:`LowCoverageError` if any pair keeps less than
    ``min_coverage`` of its pixels, since the average would then describe a
    different set of content for different frames.
    """
    pairs = long_pairs(video, flow_backend, threshold)
    _check_coverage(pairs, min_coverage)
    return _mean_finite(p.mse for p in pairs)


def _check_coverage(pairs: list[PairError], min_coverage: float) -> None:
    low = [p for p in pairs if p.coverage < min_coverage]
    if low:
        raise LowCoverageError(
            f"{len(low)} of {len(pairs)} long-term pairs keep < {min_coverage:.0%} of pixels "
            f"(worst: frame {low[0].dst}, {low[0].coverage:.1%})",
            [p.coverage for p in pairs],
        )


def interp_errors(video, flow_backend: FlowBackend) -> list[float]:
    frames = _frames(video)
    out = []
    for t in range(1, len(frames) - 1):
        cur = frames[t]
        prev_w, ok_p = flow_backend(cur, frames[t - 1], t, t - 1).warp(frames[t - 1])
        next_w, ok_n = flow_backend(cur, frames[t + 1], t, t + 1).warp(frames[t + 1])
        mask = ok_p & ok_n
        if not mask.any():
            out.append(float("nan"))
            continue
        est = 0.5 * (prev_w + next_w)
        out.append(float(np.sqrt(np.mean(((cur[mask] - est[mask]) * 255.0) ** 2))))
    return out


def interp_error(video, flow_backend: FlowBackend) -> float:
    frames = _frames(video)
    if len(frames) < 3:
        raise ShapeMismatch("interpolation error needs at least 3 frames")
    return _mean_finite(interp_errors(frames, flow_backend))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def _psnr_single(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(a, b) -> float:
    """PSNR in dB on the [0, 1] scale; sequences average per-frame values."""
    a = _frames(a)
    b = _frames(b)
    _check_pair(a, b)
    if a.ndim == 4:
        return float(np.mean([_psnr_single(x, y) for x, y in zip(a, b)]))
    return _psnr_single(a, b)


def _ssim_single(a: np.ndarray, b: np.ndarray, sigma: float = 1.5, radius: int = 5) -> float:
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    truncate = radius / sigma
    vals = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        filt = lambda z: gaussian_filter(z, sigma, truncate=truncate, mode="reflect")  # noqa: E731
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        # drop the border where the window hangs off the image
        vals.append(s[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))


def ssim(a, b) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5) and [0, 1] constants."""
    a = _frames(a)
    b = _frames(b)
    _check_pair(a, b)
    if a.ndim == 4:
        return float(np.mean([_ssim_single(x, y) for x, y in zip(a, b)]))
    return _ssim_single(a, b)


@dataclass
class ConsistencyReport:
    short_warp: float
    long_warp: float
    interp_error: float
    psnr: float | None = None
    ssim: float | None = None
    flags: list[str] = field(default_factory=list)
    per_frame: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        """Per-frame breakdown, one row per frame index."""
        keys = sorted(self.per_frame)
        n = max((len(v) for v in self.per_frame.values()), default=0)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", *keys])
            for i in range(n):
                writer.writerow([i, *(self.per_frame[k][i] if i < len(self.per_frame[k]) else "" for k in keys)])


def consistency_report(video, flow_backend: FlowBackend, against=None,
                       threshold: float = OCCLUSION_THRESHOLD, min_coverage: float = MIN_COVERAGE) -> ConsistencyReport:
    """All consistency metrics of ``video``; with ``against`` also PSNR/SSIM."""
    frames = _frames(video)
    flags = []
    short = short_pairs(frames, flow_backend, threshold)
    long_ = long_pairs(frames, flow_backend, threshold)
    try:
        _check_coverage(long_, min_coverage)
        long_val = _mean_finite(p.mse for p in long_)
    except LowCoverageError as exc:
        log.warning("%s", exc)
        flags.append("long_warp_low_coverage")
        long_val = _mean_finite(p.mse for p in long_ if p.coverage >= min_coverage)
    interp = interp_errors(frames, flow_backend) if len(frames) >= 3 else []
    if any(math.isnan(p.mse) for p in short):
        flags.append("short_warp_skipped_pairs")
    per_frame = {
        # entry t describes the pair ending at frame t (frame 0 has none)
        "short_warp": [0.0] + [0.0 if math.isnan(p.mse) else p.mse for p in short],
        "long_warp": [0.0] + [0.0 if math.isnan(p.mse) else p.mse for p in long_],
        "long_coverage": [1.0] + [p.coverage for p in long_],
        "interp_error": [0.0] + [0.0 if math.isnan(v) else v for v in interp] + ([0.0] if interp else []),
    }
    values = {"short_warp": _mean_finite(p.mse for p in short), "long_warp": long_val, "interp_error": _mean_finite(interp)}
    for name, val in values.items():
        # nothing could be compared; keep the report finite and say so
        if math.isnan(val):
            flags.append(f"{name}_undefined")
            values[name] = 0.0
    report = ConsistencyReport(**values, flags=flags, per_frame=per_frame)
    if against is not None:
        other = _frames(against)
        _check_pair(frames, other)
        report.psnr = psnr(frames, other)
        report.ssim = ssim(frames, other)
        per_frame["psnr"] = [_psnr_single(x, y) for x, y in zip(frames, other)]
        per_frame["ssim"] = [_ssim_single(x, y) for x, y in zip(frames, other)]
    return report
