from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from narcan.errors import InfeasiblePlan
from narcan.flow import ZeroFlow
from narcan.frames_io import RasterCanvas
from narcan.metrics import interp_error, psnr, ssim, warp_error_long, warp_error_short
from narcan.separation import blend_weight, grid_concat, grid_split, plan_segments
from narcan.training import PriorSchedule, SchedulePhase, count_target_generations, schedule_query

plans = st.tuples(st.integers(2, 300), st.integers(1, 8), st.integers(0, 30))


@given(plans)
def test_plan_invariants(args):
    T, k, w = args
    try:
        plan = plan_segments(T, k, w)
    except InfeasiblePlan:
        return
    assert plan.segments[0][0] == 0 and plan.segments[-1][1] == T
    if k > 1:
        assert all(b0 - a1 == w for (_, b0), (a1, _) in zip(plan.segments, plan.segments[1:]))
    for t in range(T):
        weights = blend_weight(plan, t)
        assert abs(sum(a for _, a in weights) - 1.0) < 1e-12
        assert all(0.0 <= a <= 1.0 for _, a in weights)


@st.composite
def schedules(draw):
    start = draw(st.integers(0, 50))
    phases = []
    cur = start
    for _ in range(draw(st.integers(0, 4))):
        length = draw(st.integers(1, 200))
        phases.append(SchedulePhase(cur, cur + length, draw(st.floats(0, 1)), draw(st.integers(1, 60))))
        cur += length + draw(st.integers(0, 20))
    return PriorSchedule(tuple(phases), start if not phases else phases[0].iter_start)


@given(schedules())
@settings(max_examples=60, deadline=None)
def test_count_matches_enumeration(schedule):
    end = max([p.iter_end for p in schedule.phases], default=0) + 5
    assert count_target_generations(schedule) == sum(schedule_query(schedule, i).regenerate_target for i in range(end))


@given(st.integers(1, 4), st.integers(8, 20), st.integers(8, 20), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_grid_roundtrip(k, h, w, seed):
    rng = np.random.default_rng(seed)
    cells = [RasterCanvas(rng.uniform(size=(h, w, 3)), (rng.normal(), rng.normal()), rng.uniform(0.001, 0.1))
             for _ in range(k)]
    back = grid_split(grid_concat(cells), k)
    assert all(np.array_equal(a.pixels, b.pixels) and a.geometry == b.geometry for a, b in zip(cells, back))


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_static_videos_have_zero_errors(T, seed):
    frame = np.random.default_rng(seed).uniform(size=(12, 12, 3))
    video = np.repeat(frame[None], max(T, 3), axis=0)
    assert warp_error_short(video, ZeroFlow()) == 0.0
    assert warp_error_long(video, ZeroFlow()) == 0.0
    assert interp_error(video, ZeroFlow()) == 0.0


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_psnr_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert -1.0 <= ssim(a, b) <= 1.0
