"""``narcan`` command line: fit, render, edit, mask, metrics, ablations, plans.

Exit status: 0 on success, 2 for user or config errors, 3 when the prior
backend is unreachable, 4 for numeric failures. Every command is
deterministic for a fixed seed with the in-process mock priors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .editing import EditLayer, MaskLayer, composite_edit, propagate_mask, render_edited_video
from .errors import BackendUnavailable, EmptyDirectory, InvalidInput, IoFailure, NarcanError
from .fields import CanvasSpec, canonical_bounds, render_canonical_raster
from .flow import flow_backend_from_name
from .frames_io import (
    RasterCanvas,
    export_canonical,
    import_canonical,
    load_frames,
    save_frames,
    save_mask,
    write_json_atomic,
)
from .metrics import consistency_report
from .prior import FinetuneSpec, PriorProvider, provider_from_config
from .separation import (
    grid_concat,
    grid_split,
    load_model_set,
    plan_segments,
    render_video,
    flow_between,
    save_grid_manifest,
    segment_dir_names,
    warp_edit,
    write_set_manifest,
)
from .training import (
    PriorSchedule,
    TrainConfig,
    ablation_config,
    canonical_psnr,
    default_schedule,
    per_step_schedule,
    save_run,
    train,
)

log = logging.getLogger("narcan")

ABLATION_VARIANTS = ("full", "no_homography", "no_residual", "no_prior")
# exported canonicals extend past the deformed frame boundary so residual
# displacement of interior pixels still lands inside the raster
EXPORT_MARGIN = 0.02
SYNTHETIC_SCENES = ("homography", "hybrid", "large_translation", "translation", "two_shot", "static", "translating")


# --- project config ----------------------------------------------------------

@dataclass
class ProjectConfig:
    """Everything a run needs; file keys map 1:1 onto these fields.

    ``train`` holds :class:`TrainConfig` keys, ``schedule`` is ``"default"``,
    ``"per_step"`` or a ``{prior_start_iter, phases}`` mapping, ``prior`` is
    passed to :func:`narcan.prior.provider_from_config` and ``flow`` names a
    flow backend plus its options.
    """

    frames_dir: Path
    output_dir: Path
    seed: int = 0
    k: int = 1
    overlap: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: PriorSchedule = field(default_factory=default_schedule)
    prior: dict = field(default_factory=lambda: {"kind": "identity"})
    flow: dict = field(default_factory=lambda: {"backend": "block_matching"})
    finetune: dict = field(default_factory=lambda: {"steps": 500, "rank": 4})
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInput(f"k must be >= 1, got {self.k}")
        if self.overlap < 0:
            raise InvalidInput(f"overlap must be >= 0, got {self.overlap}")

    def to_dict(self) -> dict:
        return {
            # relative to the config folder so reruns elsewhere stay byte-identical
            "frames_dir": os.path.relpath(self.frames_dir, self.base_dir),
            "output_dir": os.path.relpath(self.output_dir, self.base_dir),
            "seed": self.seed,
            "k": self.k,
            "overlap": self.overlap,
            "train": self.train.to_dict(),
            "schedule": self.schedule.to_dict(),
            "prior": self.prior,
            "flow": self.flow,
            "finetune": self.finetune,
        }


_CONFIG_KEYS = {"frames_dir", "output_dir", "seed", "k", "overlap", "train", "schedule", "prior", "flow", "finetune"}


def _schedule_from(value) -> PriorSchedule:
    if value is None or value == "default":
        return default_schedule()
    if value == "per_step":
        return per_step_schedule()
    if value == "none":
        return PriorSchedule()
    if isinstance(value, dict):
        return PriorSchedule.from_dict(value)
    raise InvalidInput(f"schedule must be 'default', 'per_step', 'none' or a mapping, got {value!r}")


def load_project_config(path, overrides: dict | None = None) -> ProjectConfig:
    """Read a YAML (or JSON) config; relative paths resolve against its folder.

    ``overrides`` (typically command-line flags) win over file values.
    """
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise InvalidInput(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidInput(f"config {path} must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise InvalidInput(f"unknown config keys in {path}: {sorted(unknown)}")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in ("frames_dir", "output_dir"):
        if key not in raw:
            raise InvalidInput(f"config {path} is missing {key!r}")
    base = path.parent
    seed = int(raw.get("seed", 0))
    train_d = dict(raw.get("train") or {})
    train_d["seed"] = seed
    iters = (overrides or {}).get("total_iters")
    if iters is not None:
        train_d["total_iters"] = iters
    try:
        train_cfg = TrainConfig.from_dict(train_d)
    except TypeError as exc:
        raise InvalidInput(f"bad train section in {path}: {exc}") from exc
    cfg = ProjectConfig(
        frames_dir=_resolve(base, raw["frames_dir"]),
        output_dir=_resolve(base, raw["output_dir"]),
        seed=seed,
        k=int(raw.get("k", 1)),
        overlap=int(raw.get("overlap", 0)),
        train=train_cfg,
        schedule=_schedule_from(raw.get("schedule")),
        prior=dict(raw.get("prior") or {"kind": "identity"}),
        flow=dict(raw.get("flow") or {"backend": "block_matching"}),
        finetune=dict(raw.get("finetune") or {"steps": 500, "rank": 4}),
        base_dir=base,
    )
    if not cfg.frames_dir.is_dir():
        raise EmptyDirectory(f"frames_dir does not exist: {cfg.frames_dir}")
    return cfg


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _provider(cfg: ProjectConfig, train_cfg: TrainConfig) -> PriorProvider | None:
    if not train_cfg.use_prior:
        return None
    return provider_from_config(cfg.prior, cfg.base_dir)


def _flow_backend(spec: dict):
    spec = dict(spec)
    return flow_backend_from_name(spec.pop("backend", "block_matching"), **spec)


# --- commands ----------------------------------------------------------------

def cmd_fit(config_path, overrides: dict | None = None) -> Path:
    """Fine-tune the prior (when supported), then fit one model per segment."""
    cfg = load_project_config(config_path, overrides)
    seq = load_frames(cfg.frames_dir)
    plan = plan_segments(seq.T, cfg.k, cfg.overlap)
    provider = _provider(cfg, cfg.train)
    extra = {"project": cfg.to_dict()}
    if provider is not None and provider.supports_finetune:
        spec = FinetuneSpec(seq, cfg.train.special_token, int(cfg.finetune.get("steps", 500)),
                            int(cfg.finetune.get("rank", 4)), dict(cfg.finetune.get("backend_config", {})))
        extra["adapter_id"] = provider.finetune(spec)
        log.info("prior fine-tuned: adapter %s", extra["adapter_id"])
    out = cfg.output_dir
    dirs = [out] if plan.k == 1 else [out / name for name in segment_dir_names(plan.k)]
    for i, ((a, b), seg_dir) in enumerate(zip(plan.segments, dirs)):
        seg_cfg = replace(cfg.train, seed=cfg.seed + i)
        log.info("segment %d/%d: frames [%d, %d)", i + 1, plan.k, a, b)
        model, report = train(seq.subsequence(a, b), seg_cfg, cfg.schedule, provider, checkpoint_dir=seg_dir)
        meta = {"segment": i, "frames": [a, b]}
        if plan.k == 1:
            meta = {"plan": plan.to_dict(), **extra}
        save_run(seg_dir, model, report, seg_cfg, cfg.schedule, meta)
        log.info("segment %d mean PSNR %.2f dB", i, report.mean_psnr)
    if plan.k > 1:
        write_set_manifest(out, plan, extra)
    return out


def cmd_render(checkpoint, out_dir, edited_canonical=None) -> list[Path]:
    model_set = load_model_set(checkpoint)
    if edited_canonical:
        canvases = [import_canonical(p) for p in edited_canonical]
        target = canvases if model_set.plan.k > 1 else canvases[0]
        if model_set.plan.k == 1 and len(canvases) != 1:
            raise InvalidInput("a single-segment checkpoint takes exactly one edited canonical")
        video = render_edited_video(model_set if model_set.plan.k > 1 else model_set.models[0], target)
    else:
        video = render_video(model_set)
    return save_frames(video, out_dir)


def _export_specs(model_set, long_side: int, margin: float, grid: bool) -> list[CanvasSpec]:
    bounds = [canonical_bounds(m, margin) for m in model_set.models]
    if grid:
        return [CanvasSpec.covering(b, long_side, long_side) for b in bounds]
    return [CanvasSpec.from_bounds(b, long_side) for b in bounds]


def cmd_export_canonical(checkpoint, out_dir, long_side: int = 256, margin: float = EXPORT_MARGIN, grid: bool = False) -> list[Path]:
    """Write ``canonical_XX.png`` (+ sidecars); ``grid`` also tiles them 2x2."""
    model_set = load_model_set(checkpoint)
    if grid and model_set.plan.k > 4:
        raise InvalidInput("the 2x2 grid holds at most 4 canonicals")
    out_dir = Path(out_dir)
    specs = _export_specs(model_set, long_side, margin, grid)
    rasters = [render_canonical_raster(m, s) for m, s in zip(model_set.models, specs)]
    paths = [export_canonical(r, out_dir / f"canonical_{i:02d}.png") for i, r in enumerate(rasters)]
    if grid:
        g = grid_concat(rasters)
        paths.append(export_canonical(g, out_dir / "grid.png"))
        save_grid_manifest(g, out_dir / "grid.json")
    return paths


def cmd_import_edit(checkpoint, out_dir, edit=None, grid=None, grid_manifest=None, segment: int = 0,
                    flow: dict | None = None) -> list[Path]:
    """Turn an edit into one edited canonical per segment.

    ``grid``: an edited 2x2 grid image is split back into its cells.
    ``edit``: an RGBA layer drawn on segment ``segment``'s canonical is
    composited there and flow-warped onto every other segment's canonical.
    """
    from .separation import load_grid_manifest

    if (edit is None) == (grid is None):
        raise InvalidInput("pass exactly one of --edit or --grid")
    model_set = load_model_set(checkpoint)
    out_dir = Path(out_dir)
    if grid is not None:
        grid_path = Path(grid)
        manifest_path = Path(grid_manifest) if grid_manifest else grid_path.with_name("grid.json")
        meta = load_grid_manifest(manifest_path)
        canvas = import_canonical(grid_path, origin_uv=(0.0, 0.0), scale=1.0)
        canvas = RasterCanvas(canvas.pixels[..., :3], canvas.origin_uv, canvas.scale, meta)
        cells = grid_split(canvas, model_set.plan.k)
        return [export_canonical(c, out_dir / f"edited_{i:02d}.png") for i, c in enumerate(cells)]

    layer = import_canonical(edit)
    if layer.channels != 4:
        raise InvalidInput(f"{edit} must be an RGBA edit layer")
    if not 0 <= segment < model_set.plan.k:
        raise InvalidInput(f"segment {segment} outside [0, {model_set.plan.k})")
    src_spec = CanvasSpec(layer.origin_uv, layer.scale, layer.height, layer.width)
    src = render_canonical_raster(model_set.models[segment], src_spec)
    backend = _flow_backend(flow or {"backend": "block_matching"})
    paths = []
    for j, model in enumerate(model_set.models):
        if j == segment:
            edited = composite_edit(src, EditLayer(layer))
        else:
            spec = CanvasSpec.covering(canonical_bounds(model, EXPORT_MARGIN), layer.height, layer.width)
            dst = render_canonical_raster(model, spec)
            moved = warp_edit(layer, flow_between(dst.pixels, src.pixels, backend))
            edited = composite_edit(dst, EditLayer(RasterCanvas(moved.pixels, dst.origin_uv, dst.scale)))
        paths.append(export_canonical(edited, out_dir / f"edited_{j:02d}.png"))
    return paths


def cmd_propagate_mask(checkpoint, out_dir, masks) -> list[Path]:
    model_set = load_model_set(checkpoint)
    layers = []
    for path in masks:
        canvas = import_canonical(path)
        px = (canvas.pixels[..., :1] >= 0.5).astype(np.float64)
        layers.append(MaskLayer(RasterCanvas(px, canvas.origin_uv, canvas.scale)))
    if len(layers) != model_set.plan.k:
        raise InvalidInput(f"need one mask per segment ({model_set.plan.k}), got {len(layers)}")
    target = layers if model_set.plan.k > 1 else layers[0]
    frames = propagate_mask(model_set if model_set.plan.k > 1 else model_set.models[0], target)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, m in enumerate(frames):
        path = out_dir / f"mask_{t:05d}.png"
        save_mask(m, path)
        paths.append(path)
    return paths


def cmd_metrics(video_dir, against=None, flow: dict | None = None, csv_path=None):
    video = load_frames(video_dir)
    other = load_frames(against) if against else None
    report = consistency_report(video, _flow_backend(flow or {"backend": "block_matching"}), other)
    if csv_path:
        report.write_csv(csv_path)
    return report


def cmd_ablate(config_path, variant: str, reference=None, overrides: dict | None = None) -> dict:
    """Train the whole video once with ``variant``'s flags; returns a report row."""
    if variant not in ABLATION_VARIANTS:
        raise InvalidInput(f"unknown ablation variant {variant!r}; choose from {list(ABLATION_VARIANTS)}")
    cfg = load_project_config(config_path, overrides)
    seq = load_frames(cfg.frames_dir)
    train_cfg = ablation_config(cfg.train, variant)
    model, report = train(seq, train_cfg, cfg.schedule, _provider(cfg, train_cfg))
    out = cfg.output_dir / f"ablate_{variant}"
    save_run(out, model, report, train_cfg, cfg.schedule, {"variant": variant})
    snapshot = export_canonical(
        render_canonical_raster(model, CanvasSpec.from_bounds(canonical_bounds(model), train_cfg.prior_long_side)),
        out / "canonical.png",
    )
    row = {"variant": variant, "psnr": report.mean_psnr, "canonical": str(snapshot)}
    if reference is not None:
        row["canonical_psnr"] = canonical_psnr(model, import_canonical(reference))
    write_json_atomic(out / "row.json", row, indent=2, sort_keys=True)
    return row


def write_synthetic(name: str, out_dir, seed: int = 0) -> dict:
    """Materialize one synthetic fixture: frames, GT canonical, GT masks, a config."""
    from . import synthetic as syn

    out_dir = Path(out_dir)
    scene = None
    info: dict = {"scene": name, "seed": seed}
    if name == "homography":
        scene = syn.homography_scene(seed=seed)
    elif name == "hybrid":
        scene = syn.homography_scene(seed=seed, warp_amplitude_px=2.0)
        info["warp_amplitude_px"] = 2.0
    elif name == "large_translation":
        scene = syn.large_translation_scene(seed=seed)
    elif name == "translation":
        scene = syn.translation_scene(seed=seed)
    elif name == "two_shot":
        video, cut = syn.two_shot_video(seed=seed)
        info["cut"] = cut
    elif name == "static":
        video = syn.static_video(seed=seed)
    elif name == "translating":
        video = syn.translating_video(seed=seed)
        info["shift_px"] = [2, 0]
    else:
        raise InvalidInput(f"unknown synthetic scene {name!r}; choose from {list(SYNTHETIC_SCENES)}")
    if scene is not None:
        video = scene.frames
        spec = CanvasSpec.from_bounds(scene.bounds(), 128)
        export_canonical(scene.gt_canonical(spec), out_dir / "gt_canonical.png")
        mask = scene.gt_canonical_mask(spec).astype(np.float64)[..., None]
        export_canonical(RasterCanvas(np.repeat(mask, 3, axis=2), spec.origin_uv, spec.scale), out_dir / "gt_canonical_mask.png")
        for t, m in enumerate(scene.masks):
            (out_dir / "masks").mkdir(parents=True, exist_ok=True)
            save_mask(m, out_dir / "masks" / f"mask_{t:05d}.png")
        info["homographies"] = scene.homographies.tolist()
    save_frames(video, out_dir / "frames")
    info["frames"] = video.T
    write_json_atomic(out_dir / "scene.json", info, indent=2, sort_keys=True)
    config = {
        "frames_dir": "frames",
        "output_dir": "run",
        "seed": seed,
        "k": 1,
        "overlap": 0,
        "schedule": "default",
        "prior": {"kind": "oracle", "reference": "gt_canonical.png"} if scene is not None else {"kind": "identity"},
        "train": {"total_iters": 3000, "batch_pixels": 2048},
    }
    (out_dir / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    return info


# --- argument parsing --------------------------------------------------------

def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames-dir", dest="frames_dir", help="override frames_dir")
    p.add_argument("--output-dir", dest="output_dir", help="override output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--iters", dest="total_iters", type=int, help="override train.total_iters")


def _overrides(args) -> dict:
    keys = ("frames_dir", "output_dir", "seed", "k", "overlap", "total_iters")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _flow_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--flow", default="block_matching", choices=["block_matching", "zero"])
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--radius", type=int, default=12)


def _flow_spec(args) -> dict:
    if args.flow == "zero":
        return {"backend": "zero"}
    return {"backend": args.flow, "patch": args.patch, "radius": args.radius}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narcan", description="Hybrid deformation field video representation toolkit")
    parser.add_argument("--version", action="version", version=f"narcan {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fine-tune the prior, then fit the model(s)")
    p.add_argument("config")
    _add_overrides(p)

    p = sub.add_parser("render", help="render the reconstruction or an edited video")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--edited-canonical", action="append", default=None, help="one per segment, in order")

    p = sub.add_parser("export-canonical", help="write canonical images with geometry sidecars")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--long-side", type=int, default=256)
    p.add_argument("--margin", type=float, default=EXPORT_MARGIN)
    p.add_argument("--grid", action="store_true", help="also tile the canonicals into a 2x2 grid")

    p = sub.add_parser("import-edit", help="produce per-segment edited canonicals")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--edit", help="RGBA edit layer drawn on one segment's canonical")
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--grid", help="edited 2x2 grid image")
    p.add_argument("--grid-manifest")
    _flow_args(p)

    p = sub.add_parser("propagate-mask", help="carry canonical masks to every frame")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--mask", action="append", required=True, help="one per segment, in order")

    p = sub.add_parser("metrics", help="temporal consistency report as JSON")
    p.add_argument("video_dir")
    p.add_argument("--against")
    p.add_argument("--csv")
    p.add_argument("--out")
    _flow_args(p)

    p = sub.add_parser("ablate", help="train one ablation variant")
    p.add_argument("config")
    p.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    p.add_argument("--reference", help="GT canonical (with sidecar) for canonical PSNR")
    _add_overrides(p)

    p = sub.add_parser("plan", help="print a segment plan or write a synthetic fixture")
    p.add_argument("--frames", type=int, help="number of frames")
    p.add_argument("--frames-dir", help="count frames in this directory")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--synthetic", choices=SYNTHETIC_SCENES)
    p.add_argument("--out", help="output directory for --synthetic")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _print_json(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run(args) -> int:
    if args.command == "fit":
        out = cmd_fit(args.config, _overrides(args))
        _print_json({"checkpoint": str(out)})
    elif args.command == "render":
        paths = cmd_render(args.checkpoint, args.out_dir, args.edited_canonical)
        _print_json({"frames": len(paths), "out_dir": str(args.out_dir)})
    elif args.command == "export-canonical":
        paths = cmd_export_canonical(args.checkpoint, args.out_dir, args.long_side, args.margin, args.grid)
        _print_json({"files": [str(p) for p in paths]})
    elif args.command == "import-edit":
        paths = cmd_import_edit(args.checkpoint, args.out_dir, args.edit, args.grid, args.grid_manifest,
                                args.segment, _flow_spec(args))
        _print_json({"files": [str(p) for p in paths]})
    elif args.command == "propagate-mask":
        paths = cmd_propagate_mask(args.checkpoint, args.out_dir, args.mask)
        _print_json({"frames": len(paths), "out_dir": str(args.out_dir)})
    elif args.command == "metrics":
        report = cmd_metrics(args.video_dir, args.against, _flow_spec(args), args.csv)
        text = report.to_json()
        if args.out:
            Path(args.out).write_text(text + "\n")
        sys.stdout.write(text + "\n")
    elif args.command == "ablate":
        _print_json(cmd_ablate(args.config, args.variant, args.reference, _overrides(args)))
    elif args.command == "plan":
        if args.synthetic:
            if not args.out:
                raise InvalidInput("--synthetic needs --out")
            info = write_synthetic(args.synthetic, args.out, args.seed)
            info.pop("homographies", None)
            _print_json(info)
        else:
            if args.frames_dir:
                n = load_frames(args.frames_dir).T
            elif args.frames:
                n = args.frames
            else:
                raise InvalidInput("pass --frames or --frames-dir")
            _print_json(plan_segments(n, args.k, args.overlap).to_dict())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except BackendUnavailable as exc:
        sys.stderr.write(f"narcan: error [{exc.code}]: {exc} ({exc.retry_hint})\n")
        return exc.exit_code
    except NarcanError as exc:
        sys.stderr.write(f"narcan: error [{exc.code}]: {exc}\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
