"""Full detector: per-frame pillar backbone, dual-query co-attention, center head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BEVBackbone, GridConfig
from .ducanet import ALIGN_FULL, DUCANet
from .head import DetectionHead, HeadOutput, OutputGrid
from .params import ParameterStore
from .pointcloud import PointFrame


@dataclass
class ModelConfig:
    n_frames: int = 3
    n_layers: int = 3
    n_scales: int = 3
    channels: int = 64
    heads: int = 8
    n_points: int = 4
    dropout: float = 0.1
    head_hidden: int = 64
    n_classes: int = 3
    align_mode: str = ALIGN_FULL
    offset_init: str = "zeros"
    gate_bias: float = 0.0
    fuse_init: str = "uniform"

    def validate(self) -> None:
        if self.n_frames < 1 or self.n_layers < 0 or self.n_scales < 1:
            raise ValueError("n_frames >= 1, n_layers >= 0 and n_scales >= 1 required")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError("channels must be a positive multiple of heads")
        if self.n_points < 1 or self.n_classes < 1 or self.head_hidden < 1:
            raise ValueError("n_points, n_classes and head_hidden must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


class DAlign:
    def __init__(self, config: ModelConfig, grid: GridConfig, store: ParameterStore):
        config.validate()
        self.config = config
        self.grid = grid
        self.store = store
        self.output_grid = OutputGrid.from_grid(grid)
        self.backbone = BEVBackbone(store, grid, config.channels, config.n_scales)
        self.ducanet = DUCANet(store, config.channels, config.n_scales, config.n_frames, config.n_layers,
                               config.heads, config.n_points, config.dropout, config.align_mode,
                               offset_init=config.offset_init, gate_bias=config.gate_bias,
                               fuse_init=config.fuse_init)
        self.head = DetectionHead(store, config.n_scales * config.channels, config.n_classes, config.head_hidden)

    def __call__(self, frames: list[PointFrame], training: bool = False,
                 rng: np.random.Generator | None = None) -> HeadOutput:
        """``frames`` are most-recent-first and already in the target frame's coordinates."""
        if len(frames) < self.config.n_frames:
            raise ValueError(f"model needs {self.config.n_frames} frames, got {len(frames)}")
        pyramids = [self.backbone(f) for f in frames[: self.config.n_frames]]
        return self.head(self.ducanet(pyramids, training, rng))
