"""Run configuration: nested dataclasses loaded from JSON with strict key checking.

Schema (every section and key optional; defaults shown by the dataclasses)::

    {
      "seed": 0,
      "scene": {SceneConfig fields},
      "grid":  {GridConfig fields},
      "model": {ModelConfig fields},
      "train": {TrainConfig fields},
      "eval":  {EvalConfig fields}
    }
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..backbone import GridConfig
from ..model import ModelConfig
from ..pointcloud import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    n_scenes: int = 200
    batch_size: int = 2
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    stage1_max_lr: float = 1e-3
    stage2_max_lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    div_factor: float = 10.0
    final_div_factor: float = 100.0
    pct_start: float = 0.5
    flip: bool = True
    rotation: float = 0.3927  # max |angle| in radians
    scaling: tuple[float, float] = (0.95, 1.05)

    def validate(self) -> None:
        if self.n_scenes < 1 or self.batch_size < 1:
            raise ConfigError("n_scenes and batch_size must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.stage1_max_lr <= 0 or self.stage2_max_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.pct_start < 1:
            raise ConfigError("pct_start must lie in (0, 1)")
        if self.div_factor < 1 or self.final_div_factor < 1:
            raise ConfigError("div factors must be >= 1")
        lo, hi = self.scaling
        if not 0 < lo <= hi:
            raise ConfigError("scaling must satisfy 0 < lo <= hi")


@dataclass
class EvalConfig:
    n_scenes: int = 50
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    score_threshold: float = 0.1
    max_boxes: int = 100
    plots: bool = True

    def validate(self) -> None:
        if self.n_scenes < 1 or self.max_boxes < 1:
            raise ConfigError("n_scenes and max_boxes must be positive")
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigError("distance thresholds must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        try:
            self.scene.validate()
            self.grid.validate(self.model.n_scales)
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.train.validate()
        self.eval.validate()
        if self.scene.n_frames < self.model.n_frames:
            raise ConfigError("scene.n_frames must be >= model.n_frames")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(model={"n_layers": 1})``."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
        return from_dict(data)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, path) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_convert(a, v, path) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
