from __future__ import annotations

import numpy as np
import pytest
import torch

from narcan.fields import FieldConfig, NarcanModel

TINY = FieldConfig(layers_g=(16, 16), layers_f=(32, 32), pe_freqs_spatial=2, pe_freqs_time=1, pe_freqs_canonical=3)


def tiny_model(T: int = 3, h: int = 16, w: int = 16, seed: int = 0) -> NarcanModel:
    return NarcanModel(T, h, w, TINY, seed=seed)


def set_constant_color(model: NarcanModel, logits) -> None:
    """Make f return sigmoid(logits) everywhere."""
    last = [m for m in model.canonical.modules() if isinstance(m, torch.nn.Linear)][-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.as_tensor(logits, dtype=last.bias.dtype))


def set_residual_bias(model: NarcanModel, du: float, dv: float) -> None:
    last = [m for m in model.residual.modules() if isinstance(m, torch.nn.Linear)][-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.tensor([du, dv], dtype=last.bias.dtype))


def set_translation(model: NarcanModel, per_frame_u: float = 0.0, per_frame_v: float = 0.0) -> None:
    with torch.no_grad():
        t = torch.arange(model.frame_count, dtype=model.homography.params.dtype)
        model.homography.params[:, 2] = per_frame_u * t
        model.homography.params[:, 5] = per_frame_v * t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
