"""Hybrid deformation field and canonical color field.

A frame pixel ``(u, v)`` at frame ``t`` maps to canonical coordinates

    (u', v') = H_t(u, v) + g(u, v, t_norm)

where ``H_t`` is a per-frame projective map and ``g`` a residual coordinate
network. The canonical network ``f(u', v')`` returns RGB in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DegenerateHomography, InvalidInput, IoFailure
from .frames_io import RasterCanvas, write_json_atomic

W_EPS = 1e-8
CHECKPOINT_VERSION = 1
BOUNDARY_SAMPLES = 65
IDENTITY_PARAMS = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)


def params_to_matrices(params: torch.Tensor) -> torch.Tensor:
    """``(..., 8)`` homography parameters to ``(..., 3, 3)`` with h33 = 1."""
    one = torch.ones_like(params[..., :1])
    return torch.cat([params, one], dim=-1).reshape(*params.shape[:-1], 3, 3)


def matrices_to_params(mats) -> np.ndarray:
    mats = np.asarray(mats, dtype=np.float64)
    mats = mats / mats[..., 2:3, 2:3]
    return mats.reshape(*mats.shape[:-2], 9)[..., :8]


class HomographyTrajectory(nn.Module):
    """One trainable 8-DOF projective map per frame, initialized to identity."""

    def __init__(self, frame_count: int, params=None):
        super().__init__()
        if params is None:
            params = torch.tensor(IDENTITY_PARAMS, dtype=torch.float32).repeat(frame_count, 1)
        params = torch.as_tensor(params, dtype=torch.float32).clone()
        if params.shape != (frame_count, 8):
            raise InvalidInput(f"homography params must be {frame_count} x 8, got {tuple(params.shape)}")
        self.params = nn.Parameter(params)

    @property
    def frame_count(self) -> int:
        return self.params.shape[0]

    def matrices(self) -> torch.Tensor:
        return params_to_matrices(self.params)

    def check_invertible(self) -> None:
        det = torch.linalg.det(self.matrices().detach().double())
        bad = torch.nonzero(det.abs() <= W_EPS).flatten()
        if len(bad):
            raise DegenerateHomography(f"homography of frame {int(bad[0])} is singular")
        if not torch.isfinite(self.params).all():
            raise DegenerateHomography("homography parameters are not finite")

    def forward(self, uv: torch.Tensor, t_index: torch.Tensor) -> torch.Tensor:
        p = self.params[t_index]
        u, v = uv[..., 0], uv[..., 1]
        w = p[..., 6] * u + p[..., 7] * v + 1.0
        if (w.detach().abs() < W_EPS).any():
            raise DegenerateHomography("projective denominator vanished at a query point")
        uh = (p[..., 0] * u + p[..., 1] * v + p[..., 2]) / w
        vh = (p[..., 3] * u + p[..., 4] * v + p[..., 5]) / w
        return torch.stack([uh, vh], dim=-1)


class PositionalEncoding(nn.Module):
    """Sinusoidal encoding ``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < L."""

    def __init__(self, n_freqs: int):
        super().__init__()
        self.n_freqs = n_freqs
        self.register_buffer("freqs", (2.0 ** torch.arange(n_freqs)) * math.pi, persistent=False)

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (1 + 2 * self.n_freqs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.n_freqs == 0:
            return x
        xb = x[..., None] * self.freqs.to(x.dtype)
        enc = torch.cat([torch.sin(xb), torch.cos(xb)], dim=-1).flatten(-2)
        return torch.cat([x, enc], dim=-1)


def _mlp(in_dim: int, widths: list[int], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    c = in_dim
    for w in widths:
        layers += [nn.Linear(c, w), nn.ReLU()]
        c = w
    layers.append(nn.Linear(c, out_dim))
    return nn.Sequential(*layers)


def _linear_layers(net: nn.Module) -> list[nn.Linear]:
    return [m for m in net.modules() if isinstance(m, nn.Linear)]


class ResidualField(nn.Module):
    """Residual displacement ``g(u, v, t_norm) -> (du, dv)``.

    The output layer starts at zero so a fresh model is a pure homography.
    """

    def __init__(self, widths=(256,) * 4, pe_freqs_spatial: int = 8, pe_freqs_time: int = 4):
        super().__init__()
        self.widths = list(widths)
        self.pe_spatial = PositionalEncoding(pe_freqs_spatial)
        self.pe_time = PositionalEncoding(pe_freqs_time)
        in_dim = self.pe_spatial.out_dim(2) + self.pe_time.out_dim(1)
        self.mlp = _mlp(in_dim, self.widths, 2)
        last = _linear_layers(self.mlp)[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, uv: torch.Tensor, t_norm: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.pe_spatial(uv), self.pe_time(t_norm[..., None])], dim=-1)
        return self.mlp(feats)


class CanonicalField(nn.Module):
    """Canonical color ``f(u', v') -> RGB``; a sigmoid keeps outputs in [0, 1]."""

    def __init__(self, widths=(256,) * 5, pe_freqs: int = 10):
        super().__init__()
        self.widths = list(widths)
        self.pe = PositionalEncoding(pe_freqs)
        self.mlp = _mlp(self.pe.out_dim(2), self.widths, 3)

    def forward(self, uv: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(self.pe(uv)))


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of a :class:`NarcanModel`.

    Layer counts follow the convention "hidden layers + output layer", so the
    defaults are 5 layers x 256 for the residual field and 6 x 256 for the
    canonical field.
    """

    layers_g: tuple[int, ...] = (256,) * 4
    layers_f: tuple[int, ...] = (256,) * 5
    pe_freqs_spatial: int = 8
    pe_freqs_time: int = 4
    pe_freqs_canonical: int = 10


class NarcanModel(nn.Module):
    def __init__(self, frame_count: int, height: int, width: int, config: FieldConfig | None = None, seed: int | None = None):
        super().__init__()
        if frame_count < 1:
            raise InvalidInput("frame_count must be positive")
        self.config = config or FieldConfig()
        self.frame_count = frame_count
        self.height = height
        self.width = width
        if seed is not None:
            torch.manual_seed(seed)
        self.homography = HomographyTrajectory(frame_count)
        self.residual = ResidualField(self.config.layers_g, self.config.pe_freqs_spatial, self.config.pe_freqs_time)
        self.canonical = CanonicalField(self.config.layers_f, self.config.pe_freqs_canonical)

    def t_norm(self, t_index: torch.Tensor) -> torch.Tensor:
        return t_index.to(torch.get_default_dtype()) / max(self.frame_count - 1, 1)

    def deform(self, uv: torch.Tensor, t_index: torch.Tensor) -> torch.Tensor:
        uv_h = self.homography(uv, t_index)
        return uv_h + self.residual(uv, self.t_norm(t_index).to(uv.dtype))

    def forward(self, uv: torch.Tensor, t_index: torch.Tensor) -> torch.Tensor:
        return self.canonical(self.deform(uv, t_index))

    def frame_uv(self) -> torch.Tensor:
        """Pixel-center coordinates of a frame as an ``(H*W, 2)`` tensor."""
        dtype = self.homography.params.dtype
        u = (torch.arange(self.width, dtype=dtype) + 0.5) / self.width
        v = (torch.arange(self.height, dtype=dtype) + 0.5) / self.height
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        return torch.stack([uu.flatten(), vv.flatten()], dim=-1)

    def _check_t(self, t_index: int) -> None:
        if not 0 <= t_index < self.frame_count:
            raise InvalidInput(f"frame index {t_index} outside [0, {self.frame_count})")

    def deform_frame(self, t_index: int) -> torch.Tensor:
        """Canonical coordinates of every pixel of frame ``t_index`` as ``(H, W, 2)``."""
        self._check_t(t_index)
        uv = self.frame_uv()
        t = torch.full((uv.shape[0],), t_index, dtype=torch.long)
        return self.deform(uv, t).reshape(self.height, self.width, 2)

    def render(self, t_index: int, chunk: int = 65536) -> torch.Tensor:
        """Differentiable render of one frame, ``(H, W, 3)``."""
        self._check_t(t_index)
        uv = self.frame_uv()
        t = torch.full((uv.shape[0],), t_index, dtype=torch.long)
        out = torch.cat([self(uv[i:i + chunk], t[i:i + chunk]) for i in range(0, len(uv), chunk)])
        return out.reshape(self.height, self.width, 3)


def _to_tensor(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=like.dtype)


def apply_homography(traj: HomographyTrajectory, u, v, t_index: int) -> tuple[float, float]:
    """Project a single point through the homography of frame ``t_index``."""
    if not 0 <= t_index < traj.frame_count:
        raise InvalidInput(f"frame index {t_index} outside [0, {traj.frame_count})")
    p = traj.params.detach().double()[t_index]
    u = float(u)
    v = float(v)
    w = float(p[6]) * u + float(p[7]) * v + 1.0
    if abs(w) < W_EPS:
        raise DegenerateHomography(f"projective denominator {w:g} at ({u}, {v}) in frame {t_index}")
    return (
        (float(p[0]) * u + float(p[1]) * v + float(p[2])) / w,
        (float(p[3]) * u + float(p[4]) * v + float(p[5])) / w,
    )


def deform(model: NarcanModel, u, v, t_index) -> torch.Tensor:
    """Canonical coordinates of frame point(s); differentiable in the model."""
    like = model.homography.params
    uv = torch.stack([_to_tensor(u, like), _to_tensor(v, like)], dim=-1)
    t = torch.as_tensor(np.broadcast_to(np.asarray(t_index), uv.shape[:-1]).copy(), dtype=torch.long)
    if ((t < 0) | (t >= model.frame_count)).any():
        raise InvalidInput("frame index out of range")
    return model.deform(uv, t)


@torch.no_grad()
def render_frame(model: NarcanModel, t_index: int) -> np.ndarray:
    return model.render(t_index).double().numpy()


@dataclass(frozen=True)
class CanvasSpec:
    origin_uv: tuple[float, float]
    scale: float
    height: int
    width: int

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise InvalidInput("canvas must be at least 8 x 8")
        if not self.scale > 0:
            raise InvalidInput("canvas scale must be positive")

    @classmethod
    def from_bounds(cls, bounds, long_side: int = 256) -> "CanvasSpec":
        """Grid whose pixel centers span ``bounds`` with ``long_side`` samples on the longer axis."""
        u0, v0, u1, v1 = (float(b) for b in bounds)
        extent = max(u1 - u0, v1 - v0)
        if not extent > 0:
            raise InvalidInput("bounds have zero extent")
        scale = extent / (long_side - 1)
        width = max(8, int(round((u1 - u0) / scale)) + 1)
        height = max(8, int(round((v1 - v0) / scale)) + 1)
        return cls((u0, v0), scale, height, width)

    @classmethod
    def covering(cls, bounds, height: int, width: int) -> "CanvasSpec":
        """Fixed ``height x width`` grid centered on ``bounds`` and covering them."""
        u0, v0, u1, v1 = (float(b) for b in bounds)
        scale = max((u1 - u0) / (width - 1), (v1 - v0) / (height - 1))
        if not scale > 0:
            raise InvalidInput("bounds have zero extent")
        cu, cv = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
        return cls((cu - 0.5 * (width - 1) * scale, cv - 0.5 * (height - 1) * scale), scale, height, width)

    def grid_uv(self) -> tuple[np.ndarray, np.ndarray]:
        u = self.origin_uv[0] + np.arange(self.width) * self.scale
        v = self.origin_uv[1] + np.arange(self.height) * self.scale
        return np.meshgrid(u, v)


def canvas_uv_tensor(spec: CanvasSpec, dtype=torch.float32) -> torch.Tensor:
    uu, vv = spec.grid_uv()
    return torch.as_tensor(np.stack([uu.ravel(), vv.ravel()], axis=-1), dtype=dtype)


@torch.no_grad()
def render_canonical_raster(model: NarcanModel, spec: CanvasSpec, chunk: int = 65536) -> RasterCanvas:
    """Sample the canonical field on the regular grid described by ``spec``."""
    if not isinstance(spec, CanvasSpec):
        spec = CanvasSpec(*spec)
    uv = canvas_uv_tensor(spec, model.homography.params.dtype)
    rgb = torch.cat([model.canonical(uv[i:i + chunk]) for i in range(0, len(uv), chunk)])
    pixels = rgb.double().numpy().reshape(spec.height, spec.width, 3)
    return RasterCanvas(pixels, spec.origin_uv, spec.scale)


def boundary_uv(height: int, width: int, n: int = BOUNDARY_SAMPLES) -> np.ndarray:
    """``n`` samples walking the pixel-center rectangle of a frame (closed loop)."""
    u0, u1 = 0.5 / width, 1.0 - 0.5 / width
    v0, v1 = 0.5 / height, 1.0 - 0.5 / height
    corners = np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1], [u0, v0]])
    per_edge = (n - 1) // 4
    pts = [
        corners[k] + (corners[k + 1] - corners[k]) * s
        for k in range(4)
        for s in np.arange(per_edge) / per_edge
    ]
    pts.append(corners[0])
    return np.asarray(pts)


@torch.no_grad()
def canonical_bounds(model: NarcanModel, margin: float = 0.0) -> tuple[float, float, float, float]:
    """Bounding box of every frame's deformed boundary, grown by ``margin``."""
    if margin < 0:
        raise InvalidInput("margin must be non-negative")
    pts = torch.as_tensor(boundary_uv(model.height, model.width), dtype=model.homography.params.dtype)
    n = len(pts)
    uv = pts.repeat(model.frame_count, 1)
    t = torch.arange(model.frame_count).repeat_interleave(n)
    warped = model.deform(uv, t).double()
    lo = warped.min(dim=0).values - margin
    hi = warped.max(dim=0).values + margin
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


# --- checkpoints -----------------------------------------------------------
#
# homography.bin : T x 8 row-major
# residual.bin   : for each Linear layer of g in order: weight (out x in,
#                  row-major) then bias
# canonical.bin  : same layout for f
# all little-endian float32

def _flat(tensors) -> np.ndarray:
    return np.concatenate([t.detach().cpu().double().numpy().ravel() for t in tensors]).astype("<f4")


def _layer_tensors(net: nn.Module) -> list[torch.Tensor]:
    out = []
    for lin in _linear_layers(net):
        out += [lin.weight, lin.bias]
    return out


def model_manifest(model: NarcanModel) -> dict:
    c = model.config
    return {
        "T": model.frame_count,
        "H": model.height,
        "W": model.width,
        "pe_freqs_spatial": c.pe_freqs_spatial,
        "pe_freqs_time": c.pe_freqs_time,
        "pe_freqs_canonical": c.pe_freqs_canonical,
        "layers_g": list(c.layers_g),
        "layers_f": list(c.layers_f),
        "version": CHECKPOINT_VERSION,
    }


def save_model(model: NarcanModel, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        blobs = {
            "homography.bin": _flat([model.homography.params]),
            "residual.bin": _flat(_layer_tensors(model.residual)),
            "canonical.bin": _flat(_layer_tensors(model.canonical)),
        }
        for name, arr in blobs.items():
            tmp = directory / (name + ".tmp")
            tmp.write_bytes(arr.tobytes())
            tmp.replace(directory / name)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint to {directory}: {exc}") from exc
    manifest = model_manifest(model)
    manifest.update(extra or {})
    write_json_atomic(directory / "manifest.json", manifest, indent=2, sort_keys=True)
    return directory


def _fill(tensors, flat: np.ndarray, name: str) -> None:
    expected = sum(t.numel() for t in tensors)
    if flat.size != expected:
        raise IoFailure(f"{name} holds {flat.size} values, model expects {expected}")
    offset = 0
    with torch.no_grad():
        for t in tensors:
            n = t.numel()
            t.copy_(torch.from_numpy(flat[offset:offset + n].astype(np.float32)).reshape(t.shape))
            offset += n


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read checkpoint manifest {path}: {exc}") from exc


def load_model(directory) -> NarcanModel:
    directory = Path(directory)
    m = read_manifest(directory)
    config = FieldConfig(
        layers_g=tuple(m["layers_g"]),
        layers_f=tuple(m["layers_f"]),
        pe_freqs_spatial=m["pe_freqs_spatial"],
        pe_freqs_time=m["pe_freqs_time"],
        pe_freqs_canonical=m["pe_freqs_canonical"],
    )
    model = NarcanModel(m["T"], m["H"], m["W"], config)
    try:
        blobs = {n: np.fromfile(directory / n, dtype="<f4") for n in ("homography.bin", "residual.bin", "canonical.bin")}
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint arrays in {directory}: {exc}") from exc
    _fill([model.homography.params], blobs["homography.bin"], "homography.bin")
    _fill(_layer_tensors(model.residual), blobs["residual.bin"], "residual.bin")
    _fill(_layer_tensors(model.canonical), blobs["canonical.bin"], "canonical.bin")
    return model
