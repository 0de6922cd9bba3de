"""Two-stage training: single-frame pre-training, then multi-frame fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..head import encode_targets, compute_loss
from ..model import DAlign, ModelConfig
from ..params import Adam, ParameterStore, clip_grad_norm
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import Sample, augment
from .evaluate import in_range

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def one_cycle_lr(step: float, total_steps: int, max_lr: float, pct_start: float = 0.5,
                 div_factor: float = 10.0, final_div_factor: float = 100.0) -> float:
    """Cosine warm-up from ``max_lr / div_factor`` to ``max_lr`` then cosine decay."""
    initial = max_lr / div_factor
    final = initial / final_div_factor
    peak = pct_start * total_steps
    if step <= peak:
        start, end, frac = initial, max_lr, step / peak if peak > 0 else 1.0
    else:
        start, end, frac = max_lr, final, (step - peak) / (total_steps - peak)
    frac = min(max(frac, 0.0), 1.0)
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))


def build_model(model_cfg: ModelConfig, cfg: RunConfig, seed: int | None = None, double: bool = False) -> DAlign:
    store = ParameterStore(cfg.seed if seed is None else seed, double=double)
    return DAlign(model_cfg, cfg.grid, store)


@dataclass
class StageHistory:
    stage: int
    epoch_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train_stage(model: DAlign, samples: list[Sample], tcfg: TrainConfig, epochs: int, max_lr: float,
                seed: int, stage: int) -> StageHistory:
    store = model.store
    opt = Adam(store, max_lr, tcfg.betas, weight_decay=tcfg.weight_decay)
    n = len(samples)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total = max(1, steps_per_epoch * epochs)
    hist = StageHistory(stage)
    start = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, stage, epoch]).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            batch = order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
            store.zero_grad()
            for idx in batch:
                rng = np.random.default_rng([seed, stage, epoch, int(idx)])
                sample = augment(samples[idx], rng, tcfg)
                try:
                    out = model(sample.frames, training=True, rng=rng)
                    targets = encode_targets(in_range(sample.boxes, model.grid.x_range, model.grid.y_range),
                                             model.output_grid, model.config.n_classes)
                    loss, info = compute_loss(out, targets)
                    T.backward(T.mul(loss, 1.0 / len(batch)))
                except FloatingPointError as exc:
                    raise TrainingDivergedError(
                        f"non-finite values in stage {stage}, epoch {epoch}, step {b}, sample {idx}: {exc}"
                    ) from exc
                losses.append(info["total"])
            for name, p in store.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise TrainingDivergedError(f"non-finite gradient for {name} in stage {stage}, epoch {epoch}")
            clip_grad_norm(store, tcfg.grad_clip)
            lr = one_cycle_lr(step, total, max_lr, tcfg.pct_start, tcfg.div_factor, tcfg.final_div_factor)
            opt.step(lr)
            hist.lr.append(lr)
            step += 1
        hist.epoch_loss.append(float(np.mean(losses)))
        log.info("stage %d epoch %d/%d loss %.4f", stage, epoch + 1, epochs, hist.epoch_loss[-1])
    hist.seconds = time.perf_counter() - start
    return hist


def single_frame_config(model_cfg: ModelConfig) -> ModelConfig:
    return dataclasses.replace(model_cfg, n_frames=1)


def pretrain(cfg: RunConfig, samples: list[Sample], out_dir: Path) -> tuple[Path, StageHistory]:
    model = build_model(single_frame_config(cfg.model), cfg)
    hist = train_stage(model, samples, cfg.train, cfg.train.stage1_epochs, cfg.train.stage1_max_lr, cfg.seed, 1)
    path = Path(out_dir) / "stage1.dalc"
    save_checkpoint(model.store.state(), path)
    return path, hist


def finetune(cfg: RunConfig, samples: list[Sample], stage1: Path, out_dir: Path,
             name: str = "model.dalc") -> tuple[Path, StageHistory]:
    model = build_model(cfg.model, cfg)
    model.store.load(load_checkpoint(stage1), strict=False)
    hist = train_stage(model, samples, cfg.train, cfg.train.stage2_epochs, cfg.train.stage2_max_lr, cfg.seed, 2)
    path = Path(out_dir) / name
    save_checkpoint(model.store.state(), path)
    return path, hist


def train(cfg: RunConfig, samples: list[Sample], out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage1, h1 = pretrain(cfg, samples, out_dir)
    final, h2 = finetune(cfg, samples, stage1, out_dir)
    summary = {
        "stage1": {"checkpoint": stage1.name, "epoch_loss": h1.epoch_loss, "seconds": h1.seconds},
        "stage2": {"checkpoint": final.name, "epoch_loss": h2.epoch_loss, "seconds": h2.seconds},
    }
    (out_dir / "train_log.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"stage1": stage1, "model": final, "history": [h1, h2]}


def load_model(cfg: RunConfig, checkpoint: str | Path, model_cfg: ModelConfig | None = None) -> DAlign:
    model = build_model(model_cfg or cfg.model, cfg)
    model.store.load(load_checkpoint(checkpoint), strict=True)
    return model
