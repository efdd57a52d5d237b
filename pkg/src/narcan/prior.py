"""Pluggable denoising priors that turn the current canonical into a target.

A provider receives a raster of the canonical region, noises it to depth
``noise_strength`` (0 = untouched, 1 = pure noise), denoises it, and returns
the result with unchanged geometry. The trainer pulls the canonical field
toward that target with a plain L2 loss.

Real diffusion backends live behind :class:`HttpPrior`; the mock providers
are deterministic and exist for tests and desk-scale experiments.
"""

from __future__ import annotations

import base64
import io
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import BackendUnavailable, GeometryMismatch, InvalidInput, UnsupportedCapability
from .frames_io import FrameSequence, RasterCanvas, import_canonical

PRIOR_URL_ENV = "NARCAN_PRIOR_URL"


def default_prompt(special_token: str) -> str:
    return f"a photo of {special_token}"


@dataclass(frozen=True)
class FinetuneSpec:
    frames: FrameSequence
    special_token: str = "sks_scene"
    steps: int = 500
    rank: int = 4
    backend_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.special_token or any(c.isspace() for c in self.special_token):
            raise InvalidInput("special_token must be non-empty and contain no whitespace")
        if self.steps < 1:
            raise InvalidInput("finetune steps must be >= 1")


class PriorProvider:
    """Base class; subclasses implement :meth:`_generate`."""

    supports_finetune = False
    nondeterministic = False

    def __init__(self):
        self.adapter_id: str | None = None

    def generate_target(self, canvas: RasterCanvas, noise_strength: float, prompt: str = "", seed: int = 0) -> RasterCanvas:
        if canvas.channels != 3:
            raise InvalidInput("prior targets are generated from 3-channel canvases")
        if not 0.0 <= noise_strength <= 1.0:
            raise InvalidInput(f"noise_strength must be in [0, 1], got {noise_strength}")
        if noise_strength == 0.0:
            return canvas.with_pixels(canvas.pixels.copy())
        pixels = np.clip(self._generate(canvas, float(noise_strength), prompt, int(seed)), 0.0, 1.0)
        if pixels.shape != canvas.pixels.shape:
            raise GeometryMismatch(f"provider returned {pixels.shape}, expected {canvas.pixels.shape}")
        return canvas.with_pixels(pixels)

    def _generate(self, canvas: RasterCanvas, strength: float, prompt: str, seed: int) -> np.ndarray:
        raise NotImplementedError

    def finetune(self, spec: FinetuneSpec) -> str:
        if not self.supports_finetune:
            raise UnsupportedCapability(f"{type(self).__name__} does not support fine-tuning")
        self.adapter_id = self._finetune(spec)
        return self.adapter_id

    def _finetune(self, spec: FinetuneSpec) -> str:
        raise NotImplementedError


class MockPrior(PriorProvider):
    """Deterministic in-process provider that records fine-tune calls."""

    def __init__(self, supports_finetune: bool = False):
        super().__init__()
        self.supports_finetune = supports_finetune
        self.calls: list[tuple[int, str]] = []

    def _finetune(self, spec: FinetuneSpec) -> str:
        self.calls.append((spec.frames.T, spec.special_token))
        return f"mock-adapter-{len(self.calls)}-{spec.special_token}"


class IdentityPrior(MockPrior):
    def _generate(self, canvas, strength, prompt, seed):
        return canvas.pixels.copy()


class OraclePrior(MockPrior):
    """Blends toward a known reference: ``(1 - s) * canvas + s * reference``."""

    def __init__(self, reference: RasterCanvas, supports_finetune: bool = False):
        super().__init__(supports_finetune)
        self.reference = reference

    def _generate(self, canvas, strength, prompt, seed):
        if not canvas.same_geometry(self.reference):
            raise GeometryMismatch(
                f"oracle reference geometry {self.reference.geometry} != queried canvas {canvas.geometry}"
            )
        return (1.0 - strength) * canvas.pixels + strength * self.reference.pixels[:, :, :3]


class BlurPrior(MockPrior):
    """Blends toward a Gaussian-blurred copy of the canvas with weight ``s``."""

    def __init__(self, radius: float = 2.0, supports_finetune: bool = False):
        super().__init__(supports_finetune)
        self.radius = radius

    def _generate(self, canvas, strength, prompt, seed):
        blurred = gaussian_filter(canvas.pixels, sigma=(self.radius, self.radius, 0), mode="nearest")
        return (1.0 - strength) * canvas.pixels + strength * blurred


def encode_png(pixels: np.ndarray) -> str:
    data = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(payload: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(payload))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


class HttpPrior(PriorProvider):
    """Client for an external img2img/LoRA service.

    Contract::

        POST /finetune {frames: [b64 png], token, steps, rank} -> {adapter_id}
        POST /img2img  {image: b64 png, strength, prompt, seed, adapter_id} -> {image: b64 png}

    Canvases are resized to ``native_size`` before upload and back afterwards.
    """

    supports_finetune = True

    def __init__(self, url: str, native_size: int = 512, timeout: float = 600.0, nondeterministic: bool = False):
        super().__init__()
        self.url = url.rstrip("/")
        self.native_size = native_size
        self.timeout = timeout
        self.nondeterministic = nondeterministic

    def _post(self, route: str, payload: dict) -> dict:
        import requests

        try:
            resp = requests.post(f"{self.url}{route}", json=payload, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise BackendUnavailable(
                f"prior backend {self.url}{route} failed: {exc}",
                retry_hint=f"is the service at {self.url} running? set {PRIOR_URL_ENV} or retry",
            ) from exc

    @staticmethod
    def _resize(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
        chans = [
            np.asarray(Image.fromarray(pixels[:, :, c].astype(np.float32), mode="F").resize((width, height), Image.BILINEAR))
            for c in range(pixels.shape[2])
        ]
        return np.clip(np.stack(chans, axis=-1).astype(np.float64), 0.0, 1.0)

    def _generate(self, canvas, strength, prompt, seed):
        h, w = canvas.height, canvas.width
        n = self.native_size
        image = self._resize(canvas.pixels, n, n) if (h, w) != (n, n) else canvas.pixels
        reply = self._post(
            "/img2img",
            {"image": encode_png(image), "strength": strength, "prompt": prompt, "seed": seed, "adapter_id": self.adapter_id},
        )
        try:
            out = decode_png(reply["image"])
        except (KeyError, OSError, ValueError) as exc:
            raise BackendUnavailable(f"malformed img2img reply: {exc}") from exc
        return self._resize(out, h, w) if out.shape[:2] != (h, w) else out

    def _finetune(self, spec):
        reply = self._post(
            "/finetune",
            {
                "frames": [encode_png(f) for f in spec.frames.frames],
                "token": spec.special_token,
                "steps": spec.steps,
                "rank": spec.rank,
                **spec.backend_config,
            },
        )
        try:
            return str(reply["adapter_id"])
        except KeyError as exc:
            raise BackendUnavailable("finetune reply lacks adapter_id") from exc


def generate_target(provider: PriorProvider, canvas: RasterCanvas, noise_strength: float, prompt: str = "", seed: int = 0) -> RasterCanvas:
    return provider.generate_target(canvas, noise_strength, prompt, seed)


def finetune(provider: PriorProvider, spec: FinetuneSpec) -> str:
    return provider.finetune(spec)


def diffusion_loss(current: RasterCanvas, target: RasterCanvas) -> float:
    """Mean squared per-channel difference between two same-geometry canvases."""
    if not current.same_geometry(target) or current.channels != target.channels:
        raise GeometryMismatch(f"canvas geometry {current.geometry} != {target.geometry}")
    return float(np.mean((current.pixels - target.pixels) ** 2))


def provider_from_config(cfg: dict | None, base_dir=None) -> PriorProvider:
    """Build a provider; ``NARCAN_PRIOR_URL`` overrides any mock selection.

    ``cfg`` keys: ``kind`` in {identity, blur, oracle, http}; ``radius`` for
    blur; ``reference`` (canonical PNG with sidecar) for oracle; ``url`` for
    http; ``supports_finetune`` for mocks.
    """
    url = os.environ.get(PRIOR_URL_ENV)
    if url:
        return HttpPrior(url)
    cfg = dict(cfg or {})
    kind = cfg.get("kind", "identity")
    ft = bool(cfg.get("supports_finetune", False))
    if kind == "identity":
        return IdentityPrior(supports_finetune=ft)
    if kind == "blur":
        return BlurPrior(float(cfg.get("radius", 2.0)), supports_finetune=ft)
    if kind == "oracle":
        ref = cfg["reference"]
        if base_dir is not None and not os.path.isabs(ref):
            ref = os.path.join(base_dir, ref)
        return OraclePrior(import_canonical(ref), supports_finetune=ft)
    if kind == "http":
        return HttpPrior(cfg["url"])
    raise InvalidInput(f"unknown prior kind {kind!r}")
