"""Joint optimization of a :class:`~narcan.fields.NarcanModel`.

Every iteration draws a random batch of ``(t, pixel)`` pairs and minimizes
``lambda_recon * MSE(render, frames)``. While the prior schedule is active
the canonical field is additionally pulled toward a cached target raster
produced by a :class:`~narcan.prior.PriorProvider`; the target is
regenerated from the *current* canonical only on the iterations the
schedule selects.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import BackendUnavailable, DegenerateHomography, InvalidInput, NumericFailure
from .fields import (
    CanvasSpec,
    FieldConfig,
    NarcanModel,
    canonical_bounds,
    canvas_uv_tensor,
    matrices_to_params,
    render_canonical_raster,
    save_model,
)
from .frames_io import FrameSequence
from .prior import PriorProvider, default_prompt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SchedulePhase:
    iter_start: int
    iter_end: int
    noise_strength: float
    update_every: int

    def __post_init__(self):
        if not self.iter_start < self.iter_end:
            raise InvalidInput(f"phase [{self.iter_start}, {self.iter_end}) is empty")
        if not 0.0 <= self.noise_strength <= 1.0:
            raise InvalidInput("noise_strength must be in [0, 1]")
        if self.update_every < 1:
            raise InvalidInput("update_every must be >= 1")

    def __contains__(self, it: int) -> bool:
        return self.iter_start <= it < self.iter_end


@dataclass(frozen=True)
class PriorSchedule:
    phases: tuple[SchedulePhase, ...] = ()
    prior_start_iter: int = 0

    def __post_init__(self):
        phases = tuple(self.phases)
        object.__setattr__(self, "phases", phases)
        for a, b in zip(phases, phases[1:]):
            if b.iter_start < a.iter_end:
                raise InvalidInput("schedule phases must be ascending and non-overlapping")
        if phases and self.prior_start_iter > phases[0].iter_start:
            raise InvalidInput("prior_start_iter must not exceed the first phase start")

    def to_dict(self) -> dict:
        return {"prior_start_iter": self.prior_start_iter, "phases": [asdict(p) for p in self.phases]}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSchedule":
        return cls(tuple(SchedulePhase(**p) for p in d.get("phases", ())), int(d.get("prior_start_iter", 0)))


@dataclass(frozen=True)
class ScheduleState:
    active: bool
    noise_strength: float = 0.0
    regenerate_target: bool = False


def default_schedule() -> PriorSchedule:
    """Prior from iteration 1000: (0.4, every 10) until 3000, (0.3, every 100)
    until 5000, then (0.2, every 2000) until 12000. Intervals are half-open."""
    return PriorSchedule(
        (
            SchedulePhase(1000, 3000, 0.4, 10),
            SchedulePhase(3000, 5000, 0.3, 100),
            SchedulePhase(5000, 12000, 0.2, 2000),
        ),
        prior_start_iter=1000,
    )


def per_step_schedule(start: int = 1000, end: int = 12000, noise_strength: float = 0.4) -> PriorSchedule:
    """Regenerate the target on every iteration (the unscheduled baseline)."""
    return PriorSchedule((SchedulePhase(start, end, noise_strength, 1),), prior_start_iter=start)


def schedule_query(schedule: PriorSchedule, it: int) -> ScheduleState:
    if it < 0:
        raise InvalidInput("iteration must be non-negative")
    for phase in schedule.phases:
        if it in phase:
            regen = (it - phase.iter_start) % phase.update_every == 0
            return ScheduleState(True, phase.noise_strength, regen)
    return ScheduleState(False)


def count_target_generations(schedule: PriorSchedule) -> int:
    return sum(-(-(p.iter_end - p.iter_start) // p.update_every) for p in schedule.phases)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 12000
    batch_pixels: int = 8192
    lr_homography: float = 1e-4
    lr_residual: float = 1e-3
    lr_canonical: float = 1e-3
    lambda_recon: float = 1.0
    lambda_prior: float = 0.1
    use_homography: bool = True
    use_residual: bool = True
    use_prior: bool = True
    # g stays at zero until this iteration so H captures global motion first
    residual_start_iter: int = 0
    seed: int = 0
    fields: FieldConfig = FieldConfig()
    # prior raster: fixed geometry, or canonical_bounds at this long side
    prior_canvas: CanvasSpec | None = None
    prior_long_side: int = 256
    prior_margin: float = 0.0
    # raster pixels per step for the prior term; 0 uses the whole raster
    prior_batch_pixels: int = 0
    special_token: str = "sks_scene"
    prompt: str | None = None
    log_every: int = 1

    def __post_init__(self):
        if self.total_iters < 1:
            raise InvalidInput("total_iters must be >= 1")
        if self.lambda_recon < 0 or self.lambda_prior < 0:
            raise InvalidInput("loss weights must be non-negative")
        if self.batch_pixels < 1:
            raise InvalidInput("batch_pixels must be >= 1")

    @property
    def effective_prompt(self) -> str:
        return self.prompt or default_prompt(self.special_token)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fields"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["fields"].items()}
        if self.prior_canvas is not None:
            d["prior_canvas"] = asdict(self.prior_canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("fields"), dict):
            fd = d["fields"]
            d["fields"] = FieldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in fd.items()})
        if isinstance(d.get("prior_canvas"), dict):
            pc = d["prior_canvas"]
            d["prior_canvas"] = CanvasSpec(tuple(pc["origin_uv"]), pc["scale"], pc["height"], pc["width"])
        return cls(**d)


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    prior_updates: list[int] = field(default_factory=list)
    final_psnr: list[float] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.final_psnr)) if self.final_psnr else float("nan")

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def write_jsonl(self, path) -> None:
        """One JSON record per logged iteration, then a closing summary record.

        Wall time is kept out of the file so reruns are byte-identical.
        """
        path = Path(path)
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"summary": True, "prior_updates": self.prior_updates, "final_psnr": self.final_psnr}, sort_keys=True))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)

    @classmethod
    def read_jsonl(cls, path) -> "TrainReport":
        report = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if rec.get("summary"):
                report.prior_updates = rec["prior_updates"]
                report.final_psnr = rec["final_psnr"]
            else:
                report.records.append(rec)
        return report


def frames_tensor(seq: FrameSequence) -> torch.Tensor:
    return torch.tensor(np.array(seq.frames, dtype=np.float32))


def sample_pixel_batch(seq: FrameSequence, n: int, generator: torch.Generator):
    """Uniform ``(t, y, x)`` index triples."""
    t = torch.randint(0, seq.T, (n,), generator=generator)
    y = torch.randint(0, seq.height, (n,), generator=generator)
    x = torch.randint(0, seq.width, (n,), generator=generator)
    return t, y, x


def _batch_uv(x: torch.Tensor, y: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return torch.stack([(x.float() + 0.5) / width, (y.float() + 0.5) / height], dim=-1)


def reconstruction_loss_tensor(model: NarcanModel, frames: torch.Tensor, batch) -> torch.Tensor:
    t, y, x = (torch.as_tensor(b, dtype=torch.long) for b in batch)
    uv = _batch_uv(x, y, model.height, model.width).to(model.homography.params.dtype)
    pred = model(uv, t)
    return torch.mean((pred - frames[t, y, x].to(pred.dtype)) ** 2)


def reconstruction_loss(model: NarcanModel, seq: FrameSequence, pixel_batch) -> float:
    """MSE between rendered and ground-truth colors of the ``(t, y, x)`` batch."""
    with torch.no_grad():
        return float(reconstruction_loss_tensor(model, frames_tensor(seq), pixel_batch))


@torch.no_grad()
def frame_psnr(model: NarcanModel, seq: FrameSequence) -> list[float]:
    from .metrics import psnr

    return [psnr(model.render(t).double().numpy(), seq.frames[t]) for t in range(seq.T)]


def _optimizer(model: NarcanModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    model.homography.params.requires_grad_(cfg.use_homography)
    for p in model.residual.parameters():
        p.requires_grad_(cfg.use_residual)
    groups = [{"params": list(model.canonical.parameters()), "lr": cfg.lr_canonical}]
    if cfg.use_homography:
        groups.append({"params": [model.homography.params], "lr": cfg.lr_homography})
    if cfg.use_residual:
        groups.append({"params": list(model.residual.parameters()), "lr": cfg.lr_residual})
    return torch.optim.Adam(groups)


def build_model(seq: FrameSequence, cfg: TrainConfig) -> NarcanModel:
    return NarcanModel(seq.T, seq.height, seq.width, cfg.fields, seed=cfg.seed)


def train(
    seq: FrameSequence,
    cfg: TrainConfig | None = None,
    schedule: PriorSchedule | None = None,
    provider: PriorProvider | None = None,
    model: NarcanModel | None = None,
    checkpoint_dir=None,
) -> tuple[NarcanModel, TrainReport]:
    """Fit a model to ``seq``; deterministic for a fixed ``cfg.seed``.

    ``use_homography=False`` freezes H at identity, ``use_residual=False``
    freezes g at zero, ``use_prior=False`` drops the prior term entirely.
    """
    cfg = cfg or TrainConfig()
    schedule = default_schedule() if schedule is None else schedule
    use_prior = cfg.use_prior and cfg.lambda_prior > 0 and bool(schedule.phases)
    if cfg.use_prior and provider is None:
        raise InvalidInput("use_prior requires a prior provider")
    if model is None:
        model = build_model(seq, cfg)
    if not cfg.use_homography:
        with torch.no_grad():
            model.homography.params.copy_(torch.tensor([1.0, 0, 0, 0, 1.0, 0, 0, 0]).repeat(seq.T, 1))

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _optimizer(model, cfg)
    frames = frames_tensor(seq)
    report = TrainReport()
    target_uv = target_rgb = None
    started = time.perf_counter()

    for it in range(cfg.total_iters):
        batch = sample_pixel_batch(seq, cfg.batch_pixels, gen)
        try:
            recon = reconstruction_loss_tensor(model, frames, batch)
        except DegenerateHomography as exc:
            exc.iteration = it
            raise DegenerateHomography(f"iteration {it}: {exc}", iteration=it) from exc
        loss = cfg.lambda_recon * recon
        prior_val = None
        state = schedule_query(schedule, it) if use_prior else ScheduleState(False)
        regenerated = False
        if state.active:
            if state.regenerate_target or target_uv is None:
                target_uv, target_rgb = _regenerate_target(model, cfg, provider, state, it, checkpoint_dir)
                report.prior_updates.append(it)
                regenerated = True
            if cfg.prior_batch_pixels and cfg.prior_batch_pixels < len(target_uv):
                idx = torch.randint(0, len(target_uv), (cfg.prior_batch_pixels,), generator=gen)
                uv_s, rgb_s = target_uv[idx], target_rgb[idx]
            else:
                uv_s, rgb_s = target_uv, target_rgb
            prior = torch.mean((model.canonical(uv_s) - rgb_s) ** 2)
            loss = loss + cfg.lambda_prior * prior
            prior_val = float(prior.detach())

        opt.zero_grad(set_to_none=True)
        loss.backward()
        if it < cfg.residual_start_iter:
            for p in model.residual.parameters():
                p.grad = None
        opt.step()

        total = float(loss.detach())
        if not math.isfinite(total):
            raise NumericFailure(f"non-finite loss {total} at iteration {it}")
        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            rec = {"iter": it, "recon": float(recon.detach()), "total": total}
            if prior_val is not None:
                rec["prior"] = prior_val
                rec["noise_strength"] = state.noise_strength
            if regenerated:
                rec["prior_update"] = True
            report.records.append(rec)

    try:
        model.homography.check_invertible()
    except DegenerateHomography as exc:
        raise DegenerateHomography(f"after training: {exc}", iteration=cfg.total_iters) from exc
    report.final_psnr = frame_psnr(model, seq)
    report.wall_time = time.perf_counter() - started
    log.info("trained %d iters in %.1fs, mean PSNR %.2f dB", cfg.total_iters, report.wall_time, report.mean_psnr)
    return model, report


def prior_canvas_spec(model: NarcanModel, cfg: TrainConfig) -> CanvasSpec:
    if cfg.prior_canvas is not None:
        return cfg.prior_canvas
    return CanvasSpec.from_bounds(canonical_bounds(model, cfg.prior_margin), cfg.prior_long_side)


def _regenerate_target(model, cfg, provider, state, it, checkpoint_dir):
    spec = prior_canvas_spec(model, cfg)
    current = render_canonical_raster(model, spec)
    try:
        target = provider.generate_target(current, state.noise_strength, cfg.effective_prompt, cfg.seed + it)
    except BackendUnavailable:
        if checkpoint_dir is not None:
            save_model(model, checkpoint_dir, {"aborted_at_iter": it})
            log.error("prior backend unavailable at iteration %d; checkpoint saved to %s", it, checkpoint_dir)
        raise
    uv = canvas_uv_tensor(spec, model.homography.params.dtype)
    rgb = torch.as_tensor(target.pixels.reshape(-1, 3), dtype=uv.dtype)
    return uv, rgb


def ablation_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Flags for the ablation variants ``full``, ``no_homography``, ``no_residual``, ``no_prior``."""
    flags = {
        "full": {},
        "no_homography": {"use_homography": False},
        "no_residual": {"use_residual": False},
        "no_prior": {"use_prior": False},
    }
    if variant not in flags:
        raise InvalidInput(f"unknown ablation variant {variant!r}; choose from {sorted(flags)}")
    return replace(cfg, **flags[variant])


def save_run(directory, model: NarcanModel, report: TrainReport, cfg: TrainConfig, schedule: PriorSchedule, extra: dict | None = None) -> Path:
    directory = Path(directory)
    meta = {"train_config": cfg.to_dict(), "schedule": schedule.to_dict()}
    meta.update(extra or {})
    save_model(model, directory, meta)
    report.write_jsonl(directory / "report.jsonl")
    return directory


def _warp_points(params: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    u, v = uv[:, 0], uv[:, 1]
    w = params[6] * u + params[7] * v + 1.0
    return torch.stack([(params[0] * u + params[1] * v + params[2]) / w, (params[3] * u + params[4] * v + params[5]) / w], -1)


def align_canonical(model: NarcanModel, uv: torch.Tensor, target: torch.Tensor, max_shift: float = 0.25,
                    shift_step: float = 1 / 96, steps: int = 300, seed: int = 0) -> np.ndarray:
    """Homography ``A`` minimizing ``|f(A p) - target(p)|^2`` over the points ``p``.

    The canonical image is only defined up to an invertible warp, so this
    fixes the gauge before comparing against a reference. A brute-force
    translation search seeds a gradient refinement of all 8 parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    sub = torch.randperm(len(uv), generator=gen)[:4096]
    offsets = torch.arange(-max_shift, max_shift + 1e-9, shift_step)
    best, best_d = float("inf"), (0.0, 0.0)
    with torch.no_grad():
        for du in offsets:
            for dv in offsets:
                shifted = uv[sub] + torch.stack([du, dv]).to(uv.dtype)
                err = float(torch.mean((model.canonical(shifted) - target[sub]) ** 2))
                if err < best:
                    best, best_d = err, (float(du), float(dv))
    params = torch.tensor([1.0, 0, best_d[0], 0, 1.0, best_d[1], 0, 0], dtype=uv.dtype, requires_grad=True)
    opt = torch.optim.Adam([params], lr=1e-3)
    frozen = [p.requires_grad for p in model.canonical.parameters()]
    for p in model.canonical.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(steps):
            loss = torch.mean((model.canonical(_warp_points(params, uv)) - target) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for p, f in zip(model.canonical.parameters(), frozen):
            p.requires_grad_(f)
    mat = np.append(params.detach().double().numpy(), 1.0).reshape(3, 3)
    return mat


def canonical_psnr(model: NarcanModel, reference, mask: np.ndarray | None = None, align: bool = False) -> float:
    """PSNR of the canonical field sampled on ``reference``'s grid.

    ``mask`` restricts the comparison to selected raster pixels; ``align``
    first removes the best-fitting homography between the two (gauge).
    """
    from .metrics import PSNR_CAP

    spec = CanvasSpec(reference.origin_uv, reference.scale, reference.height, reference.width)
    uv = canvas_uv_tensor(spec)
    target = torch.as_tensor(reference.pixels[..., :3].reshape(-1, 3), dtype=uv.dtype)
    if mask is not None:
        keep = torch.as_tensor(np.asarray(mask, dtype=bool).ravel())
        uv, target = uv[keep], target[keep]
    if align:
        mat = torch.as_tensor(matrices_to_params(align_canonical(model, uv, target)), dtype=uv.dtype)
        uv = _warp_points(mat, uv)
    with torch.no_grad():
        mse = float(torch.mean((model.canonical(uv).double() - target.double()) ** 2))
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * math.log10(1 / mse))
