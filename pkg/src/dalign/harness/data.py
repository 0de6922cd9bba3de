"""Synthetic dataset generation, loading and augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..pointcloud import (
    BoxSet,
    PointFrame,
    SceneConfig,
    build_frames,
    frames_in_target_coords,
    generate_scene,
    read_sequence,
    write_sequence,
)
from .config import RunConfig, TrainConfig

SPLITS = {"train": 0, "eval": 1}


def scene_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS[split], index]).generate_state(1)[0])


def scene_path(data_dir: Path, split: str, index: int) -> Path:
    return Path(data_dir) / split / f"scene_{index:05d}.daln"


def generate_dataset(cfg: RunConfig, data_dir: str | Path, seed: int | None = None) -> dict[str, int]:
    """Write ``cfg.train.n_scenes`` training and ``cfg.eval.n_scenes`` evaluation sequences."""
    seed = cfg.seed if seed is None else seed
    data_dir = Path(data_dir)
    counts = {"train": cfg.train.n_scenes, "eval": cfg.eval.n_scenes}
    for split, n in counts.items():
        (data_dir / split).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            sweeps, truth = generate_scene(cfg.scene, scene_seed(seed, split, i))
            write_sequence(build_frames(sweeps), truth, scene_path(data_dir, split, i))
    manifest = {"seed": seed, "counts": counts, "scene": cfg.to_dict()["scene"]}
    (data_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return counts


@dataclass
class Sample:
    frames: list[PointFrame]  # most recent first, target coordinates
    boxes: BoxSet  # target-frame truth


def load_samples(data_dir: str | Path, split: str, n_frames: int, limit: int | None = None) -> list[Sample]:
    data_dir = Path(data_dir)
    paths = sorted((data_dir / split).glob("scene_*.daln"))
    if not paths:
        raise FileNotFoundError(f"no {split} scenes under {data_dir}")
    if limit is not None:
        paths = paths[:limit]
    samples = []
    for p in paths:
        frames, truth = read_sequence(p)
        samples.append(Sample(frames_in_target_coords(frames, n_frames), truth.frames[-1]))
    return samples


def augment(sample: Sample, rng: np.random.Generator, cfg: TrainConfig) -> Sample:
    """Random flip about the x axis, rotation about z and uniform scaling, shared by all frames."""
    flip = cfg.flip and rng.random() < 0.5
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation > 0 else 0.0
    scale = float(rng.uniform(*cfg.scaling))
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])

    def xy(a: np.ndarray) -> np.ndarray:
        a = a.astype(np.float64).copy()
        if flip:
            a[:, 1] = -a[:, 1]
        return (a @ rot.T) * scale

    frames = []
    for f in sample.frames:
        pts = f.points.copy()
        pts[:, :2] = xy(f.points[:, :2]).astype(np.float32)
        pts[:, 2] = (f.points[:, 2].astype(np.float64) * scale).astype(np.float32)
        frames.append(PointFrame(f.frame_index, pts, f.reference_pose))

    p = sample.boxes.params.astype(np.float64).copy()
    if len(p):
        yaw = -p[:, 6] if flip else p[:, 6]
        p[:, 0:2] = xy(p[:, 0:2])
        p[:, 2:6] *= scale
        p[:, 6] = np.mod(yaw + angle + np.pi, 2 * np.pi) - np.pi
        p[:, 7:9] = xy(p[:, 7:9])
    boxes = BoxSet(p.astype(np.float32), sample.boxes.class_id.copy(), sample.boxes.instance_id.copy())
    return Sample(frames, boxes)


def scene_config_summary(cfg: SceneConfig) -> str:
    return (f"{cfg.n_objects} objects, speed {cfg.speed_range[0]}-{cfg.speed_range[1]} m/s, "
            f"{cfg.sweeps_per_frame} sweeps/frame at {cfg.sweep_rate} Hz, {cfg.n_frames} frames")
