"""Inspect the diffusion-prior schedule and run a short fit with a mock prior.

The default schedule regenerates its target a couple of hundred times; the
per-step variant does it every iteration. A quick fit with the Oracle prior
shows the canonical drifting toward the reference as targets are refreshed.
"""

from __future__ import annotations

from narcan.fields import CanvasSpec, FieldConfig
from narcan.prior import OraclePrior
from narcan.synthetic import homography_scene
from narcan.training import (
    PriorSchedule,
    SchedulePhase,
    TrainConfig,
    count_target_generations,
    default_schedule,
    per_step_schedule,
    schedule_query,
    train,
)


def main() -> None:
    default = default_schedule()
    per_step = per_step_schedule()
    n_default = count_target_generations(default)
    n_step = count_target_generations(per_step)
    print(f"target generations: default {n_default}, per-step {n_step} ({n_step / n_default:.1f}x)")
    for it in (0, 999, 1000, 1010, 2999, 3000, 3100, 11999, 12000):
        print(f"  iter {it:5d}: {schedule_query(default, it)}")

    scene = homography_scene(T=8, size=32)
    spec = CanvasSpec.from_bounds(scene.bounds(0.02), 48)
    reference = scene.gt_canonical(spec)
    schedule = PriorSchedule((SchedulePhase(100, 300, 0.5, 20), SchedulePhase(300, 600, 0.3, 50)), 100)
    cfg = TrainConfig(total_iters=600, batch_pixels=512, lambda_prior=1.0, prior_canvas=spec, log_every=100,
                      fields=FieldConfig((32, 32), (64, 64), pe_freqs_canonical=5))
    _, report = train(scene.frames, cfg, schedule, OraclePrior(reference))
    for entry in report.records:
        print(f"iter {entry['iter']:4d}  recon {entry['recon']:.5f}  prior {entry.get('prior', 0.0):.5f}")
    print(f"target updates at iterations {report.prior_updates}")


if __name__ == "__main__":
    main()
