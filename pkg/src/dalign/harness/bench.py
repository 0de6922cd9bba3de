"""Wall-clock timing of the main forward/backward paths."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..head import compute_loss, encode_targets
from ..tensor import no_grad
from .config import RunConfig
from .data import Sample
from .evaluate import in_range
from .train import build_model


@dataclass
class BenchRow:
    name: str
    median_s: float
    min_s: float
    repeats: int


def _time(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), float(np.min(times))


def run_bench(cfg: RunConfig, sample: Sample, repeats: int = 3) -> list[BenchRow]:
    rows = []
    variants = [("single_frame", dataclasses.replace(cfg.model, n_frames=1)), ("multi_frame", cfg.model)]
    for label, mcfg in variants:
        model = build_model(mcfg, cfg)
        targets = encode_targets(in_range(sample.boxes, cfg.grid.x_range, cfg.grid.y_range),
                                 model.output_grid, mcfg.n_classes)

        def backbone():
            with no_grad():
                model.backbone(sample.frames[0])

        def forward():
            with no_grad():
                model(sample.frames)

        def step():
            model.store.zero_grad()
            loss, _ = compute_loss(model(sample.frames, training=True, rng=np.random.default_rng(0)), targets)
            T.backward(loss)

        if label == "single_frame":
            rows.append(BenchRow("backbone_forward", *_time(backbone, repeats), repeats))
        rows.append(BenchRow(f"{label}_forward", *_time(forward, repeats), repeats))
        rows.append(BenchRow(f"{label}_train_step", *_time(step, repeats), repeats))
    return rows


def to_tsv(rows: list[BenchRow]) -> str:
    lines = ["name\tmedian_s\tmin_s\trepeats"]
    lines += [f"{r.name}\t{r.median_s:.4f}\t{r.min_s:.4f}\t{r.repeats}" for r in rows]
    return "\n".join(lines) + "\n"
