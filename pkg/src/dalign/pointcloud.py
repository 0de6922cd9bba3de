"""Synthetic multi-sweep LiDAR sequences, ego-motion compensation and the DALN file format.

Coordinates: x forward, y left, z up, meters. An ego pose maps ego (sensor)
coordinates to world coordinates, ``p_world = R @ p_ego + t``. The ego origin
sits on the ground plane; the sensor height only matters for which box faces
are visible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DALN"
VERSION = 1

CLASS_NAMES = ("car", "pedestrian", "cyclist")
# (length, width, height) means and the fraction of the global speed range each class uses
CLASS_SIZES = np.array([[4.2, 1.8, 1.6], [0.7, 0.7, 1.7], [1.8, 0.6, 1.7]])
CLASS_SPEED_SCALE = np.array([1.0, 0.25, 0.6])
SENSOR_HEIGHT = 1.8
REFERENCE_RANGE = 10.0

BOX_RECORD = np.dtype([("params", "<f4", (9,)), ("class_id", "<u4"), ("instance_id", "<u4")])


class SequenceFormatError(ValueError):
    """Raised for malformed DALN files."""


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_xy_yaw(x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.array([x, y, z], dtype=np.float64))

    def validate(self, tol: float = 1e-9) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.asarray(self.translation).shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
            raise ValueError("pose rotation is not orthonormal")

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def to_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.rotation, np.float64).ravel(), np.asarray(self.translation, np.float64)])

    @staticmethod
    def from_array(a: np.ndarray) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        return Pose(a[:9].reshape(3, 3).copy(), a[9:12].copy())


@dataclass
class Sweep:
    timestamp: float
    points: np.ndarray  # (P, 4): x, y, z, reflectance, float64
    ego_pose: Pose


@dataclass
class PointFrame:
    frame_index: int
    points: np.ndarray  # (P, 5) float32: x, y, z, r, dt
    reference_pose: Pose


@dataclass
class BoxSet:
    """Ground-truth boxes of one frame.

    ``params`` columns: x, y, z, length, width, height, yaw, vx, vy (float32),
    expressed in the frame's reference ego coordinates.
    """

    params: np.ndarray
    class_id: np.ndarray
    instance_id: np.ndarray

    @staticmethod
    def empty() -> "BoxSet":
        return BoxSet(np.zeros((0, 9), np.float32), np.zeros(0, np.uint32), np.zeros(0, np.uint32))

    def __len__(self) -> int:
        return len(self.params)


@dataclass
class SceneTruth:
    frames: list[BoxSet] = field(default_factory=list)


@dataclass
class SceneConfig:
    half_extent: float = 25.6
    n_objects: int = 12
    speed_range: tuple[float, float] = (0.0, 8.0)
    yaw_rate_range: tuple[float, float] = (-0.2, 0.2)
    density: float = 2.0  # points per m^2 of visible face per sweep at 10 m
    occlusion_prob: float = 0.3
    occlusion_factor: float = 0.1
    clutter_density: float = 0.02  # ground points per m^2 per sweep
    n_distractors: int = 4
    ego_speed_range: tuple[float, float] = (0.0, 5.0)
    ego_yaw_rate_range: tuple[float, float] = (-0.1, 0.1)
    sweeps_per_frame: int = 10
    sweep_rate: float = 20.0
    n_frames: int = 3
    max_range: float = 40.0
    noise_std: float = 0.02

    def validate(self) -> None:
        if self.n_objects < 0 or self.n_distractors < 0:
            raise ValueError("object counts must be non-negative")
        if self.sweeps_per_frame < 1 or self.n_frames < 1:
            raise ValueError("need at least one sweep and one frame")
        for name in ("speed_range", "ego_speed_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
        lo, hi = self.yaw_rate_range
        if hi < lo:
            raise ValueError("yaw_rate_range must satisfy lo <= hi")
        if self.density < 0 or self.clutter_density < 0 or self.noise_std < 0:
            raise ValueError("densities and noise must be non-negative")
        if self.sweep_rate <= 0 or self.half_extent <= 0 or self.max_range <= 0:
            raise ValueError("sweep_rate, half_extent and max_range must be positive")
        if not 0 <= self.occlusion_prob <= 1 or not 0 <= self.occlusion_factor <= 1:
            raise ValueError("occlusion parameters must lie in [0, 1]")

    @property
    def frame_duration(self) -> float:
        return self.sweeps_per_frame / self.sweep_rate


def _unicycle(x0, y0, yaw0, speed, yaw_rate, t):
    """Closed-form constant speed / constant turn-rate motion."""
    yaw = yaw0 + yaw_rate * t
    if abs(yaw_rate) < 1e-9:
        return x0 + speed * t * math.cos(yaw0), y0 + speed * t * math.sin(yaw0), yaw
    r = speed / yaw_rate
    return x0 + r * (math.sin(yaw) - math.sin(yaw0)), y0 - r * (math.cos(yaw) - math.cos(yaw0)), yaw


@dataclass
class _Actor:
    class_id: int  # -1 for distractors
    size: np.ndarray
    x0: float
    y0: float
    yaw0: float
    speed: float
    yaw_rate: float
    reflectance: float

    def state(self, t: float):
        return _unicycle(self.x0, self.y0, self.yaw0, self.speed, self.yaw_rate, t)


def expected_points(size: np.ndarray, center_xy: np.ndarray, yaw: float, sensor_xy: np.ndarray,
                    density: float) -> tuple[float, list[tuple[int, float]]]:
    """Expected per-sweep point count for a box and its visible faces.

    Returns ``(lambda, [(face, area), ...])``. Faces: 0/1 = +x/-x ends,
    2/3 = +y/-y sides, 4 = top (visible when the box is lower than the sensor).
    """
    length, width, height = size
    c, s = math.cos(yaw), math.sin(yaw)
    ax = np.array([c, s])
    ay = np.array([-s, c])
    to_sensor = sensor_xy - center_xy
    faces = []
    if to_sensor @ ax > length / 2:
        faces.append((0, width * height))
    elif to_sensor @ ax < -length / 2:
        faces.append((1, width * height))
    if to_sensor @ ay > width / 2:
        faces.append((2, length * height))
    elif to_sensor @ ay < -width / 2:
        faces.append((3, length * height))
    if height < SENSOR_HEIGHT:
        faces.append((4, length * width))
    rng_m = max(float(np.hypot(*to_sensor)), 1.0)
    area = sum(a for _, a in faces)
    return density * area * (REFERENCE_RANGE / rng_m) ** 2, faces


def _sample_box_surface(rng, actor: _Actor, t: float, sensor_xy: np.ndarray, density: float,
                        noise_std: float, visibility: float) -> np.ndarray:
    x, y, yaw = actor.state(t)
    lam, faces = expected_points(actor.size, np.array([x, y]), yaw, sensor_xy, density)
    n = rng.poisson(lam * visibility)
    if n == 0 or not faces:
        return np.zeros((0, 4))
    areas = np.array([a for _, a in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    length, width, height = actor.size
    local = np.empty((n, 3))
    local[:, 0] = u[:, 0] * length
    local[:, 1] = u[:, 1] * width
    local[:, 2] = (u[:, 2] + 0.5) * height
    face_ids = np.array([f for f, _ in faces])[which]
    local[face_ids == 0, 0] = length / 2
    local[face_ids == 1, 0] = -length / 2
    local[face_ids == 2, 1] = width / 2
    local[face_ids == 3, 1] = -width / 2
    local[face_ids == 4, 2] = height
    local += rng.normal(0.0, noise_std, size=local.shape)
    c, s = math.cos(yaw), math.sin(yaw)
    world = np.empty((n, 4))
    world[:, 0] = x + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = y + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = local[:, 2]
    world[:, 3] = np.clip(actor.reflectance + rng.normal(0, 0.05, n), 0.0, 1.0)
    return world


def _spawn_actors(rng, config: SceneConfig) -> list[_Actor]:
    actors: list[_Actor] = []
    lim = config.half_extent * 0.85
    total = config.n_objects + config.n_distractors
    for k in range(total):
        distractor = k >= config.n_objects
        for _ in range(100):
            if distractor:
                cls = -1
                size = rng.uniform([0.3, 0.3, 0.4], [1.5, 1.5, 2.5])
            else:
                cls = int(rng.integers(len(CLASS_NAMES)))
                size = CLASS_SIZES[cls] * rng.uniform(0.9, 1.1, size=3)
            x0, y0 = rng.uniform(-lim, lim, size=2)
            radius = 0.5 * math.hypot(size[0], size[1])
            if math.hypot(x0, y0) < 3.0 + radius:
                continue
            if all(math.hypot(x0 - a.x0, y0 - a.y0) > radius + 0.5 * math.hypot(*a.size[:2]) + 0.5 for a in actors):
                break
        yaw0 = float(rng.uniform(-math.pi, math.pi))
        if distractor:
            speed, yaw_rate, refl = 0.0, 0.0, float(rng.uniform(0.1, 0.5))
        else:
            lo, hi = config.speed_range
            speed = float(rng.uniform(lo, hi)) * CLASS_SPEED_SCALE[cls]
            yaw_rate = float(rng.uniform(*config.yaw_rate_range)) if speed > 0 else 0.0
            refl = float(rng.uniform(0.3, 0.9))
        actors.append(_Actor(cls, size, float(x0), float(y0), yaw0, speed, yaw_rate, refl))
    return actors


def _wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(out <= -np.pi, out + 2 * np.pi, out)


def generate_scene(config: SceneConfig, seed: int) -> tuple[list[list[Sweep]], SceneTruth]:
    """Simulate ``config.n_frames`` frames of ``config.sweeps_per_frame`` sweeps each.

    Sweeps are returned in their own sensor coordinates, grouped per frame in
    time order; truth boxes are given in each frame's key-sweep coordinates.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    actors = _spawn_actors(rng, config)
    ego_speed = float(rng.uniform(*config.ego_speed_range))
    ego_yaw_rate = float(rng.uniform(*config.ego_yaw_rate_range)) if ego_speed > 0 else 0.0
    n_sweeps = config.n_frames * config.sweeps_per_frame
    # visibility per (frame, actor) models persistent partial occlusion
    occluded = rng.random((config.n_frames, len(actors))) < config.occlusion_prob
    extent = config.half_extent * 1.25

    frames: list[list[Sweep]] = []
    truth = SceneTruth()
    for f in range(config.n_frames):
        sweeps = []
        for m in range(config.sweeps_per_frame):
            k = f * config.sweeps_per_frame + m
            t = k / config.sweep_rate
            ex, ey, eyaw = _unicycle(0.0, 0.0, 0.0, ego_speed, ego_yaw_rate, t)
            pose = Pose.from_xy_yaw(ex, ey, eyaw)
            sensor_xy = np.array([ex, ey])
            chunks = []
            for a_i, actor in enumerate(actors):
                vis = config.occlusion_factor if occluded[f, a_i] else 1.0
                chunks.append(_sample_box_surface(rng, actor, t, sensor_xy, config.density, config.noise_std, vis))
            n_clutter = rng.poisson(config.clutter_density * (2 * extent) ** 2)
            clutter_local = np.column_stack([
                rng.uniform(-extent, extent, size=(n_clutter, 2)),
                rng.normal(0.0, config.noise_std, n_clutter),
                rng.uniform(0.0, 0.3, n_clutter),
            ])
            clutter = np.column_stack([pose.apply(clutter_local[:, :3]), clutter_local[:, 3]])
            world = np.concatenate(chunks + [clutter], axis=0)
            local_xyz = pose.inverse().apply(world[:, :3])
            keep = np.hypot(local_xyz[:, 0], local_xyz[:, 1]) <= config.max_range
            pts = np.column_stack([local_xyz, world[:, 3]])[keep]
            sweeps.append(Sweep(t, pts, pose))
        frames.append(sweeps)

        key_t = sweeps[-1].timestamp
        key_inv = sweeps[-1].ego_pose.inverse()
        rows, cls_ids, inst_ids = [], [], []
        for a_i, actor in enumerate(actors):
            if actor.class_id < 0:
                continue
            x, y, yaw = actor.state(key_t)
            c_local = key_inv.apply(np.array([[x, y, actor.size[2] / 2]]))[0]
            v_world = np.array([actor.speed * math.cos(yaw), actor.speed * math.sin(yaw), 0.0])
            v_local = key_inv.rotation @ v_world
            yaw_local = float(_wrap_angle(yaw - sweeps[-1].ego_pose.yaw))
            rows.append([*c_local, *actor.size, yaw_local, v_local[0], v_local[1]])
            cls_ids.append(actor.class_id)
            inst_ids.append(a_i)
        if rows:
            truth.frames.append(BoxSet(np.asarray(rows, np.float32), np.asarray(cls_ids, np.uint32),
                                       np.asarray(inst_ids, np.uint32)))
        else:
            truth.frames.append(BoxSet.empty())
    return frames, truth


def ego_compensate(sweep: Sweep, target_pose: Pose) -> Sweep:
    """Re-express a sweep's points in ``target_pose`` ego coordinates."""
    sweep.ego_pose.validate()
    target_pose.validate()
    rel = target_pose.inverse().compose(sweep.ego_pose)
    pts = sweep.points.copy()
    pts[:, :3] = rel.apply(sweep.points[:, :3])
    return Sweep(sweep.timestamp, pts, target_pose)


def assemble_frame(sweeps: list[Sweep], frame_index: int = 0) -> PointFrame:
    """Merge sweeps (already compensated to the key pose) into one 5-dim frame.

    The key sweep is the most recent one; ``dt`` is its timestamp minus each
    sweep's timestamp.
    """
    if not sweeps:
        raise ValueError("assemble_frame needs at least one sweep")
    key = max(sweeps, key=lambda s: s.timestamp)
    parts = []
    for s in sweeps:
        dt = round(key.timestamp - s.timestamp, 9)
        parts.append(np.column_stack([s.points, np.full(len(s.points), dt)]))
    pts = np.concatenate(parts, axis=0).astype(np.float32)
    return PointFrame(frame_index, pts, key.ego_pose)


def build_frames(sweep_groups: list[list[Sweep]]) -> list[PointFrame]:
    """Compensate each group to its key sweep and assemble a frame per group."""
    frames = []
    for n, group in enumerate(sweep_groups):
        key_pose = max(group, key=lambda s: s.timestamp).ego_pose
        frames.append(assemble_frame([ego_compensate(s, key_pose) for s in group], n))
    return frames


def transform_frame(frame: PointFrame, target_pose: Pose) -> PointFrame:
    """Re-express a whole frame in another ego coordinate system."""
    rel = target_pose.inverse().compose(frame.reference_pose)
    pts = frame.points.copy()
    pts[:, :3] = rel.apply(frame.points[:, :3].astype(np.float64)).astype(np.float32)
    return PointFrame(frame.frame_index, pts, target_pose)


def frames_in_target_coords(frames: list[PointFrame], n_frames: int) -> list[PointFrame]:
    """Last ``n_frames`` frames, most recent first, all in the target frame's coordinates."""
    if len(frames) < n_frames:
        raise ValueError(f"sequence has {len(frames)} frames, need {n_frames}")
    target = frames[-1]
    out = [target]
    for k in range(1, n_frames):
        out.append(transform_frame(frames[-1 - k], target.reference_pose))
    return out


def write_sequence(frames: list[PointFrame], truth: SceneTruth, path) -> None:
    if len(truth.frames) != len(frames):
        raise ValueError("truth must have one box set per frame")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(frames)))
        for frame in frames:
            pts = np.ascontiguousarray(frame.points, dtype="<f4")
            if pts.ndim != 2 or pts.shape[1] != 5:
                raise ValueError("frame points must be (P, 5)")
            fh.write(struct.pack("<I", len(pts)))
            fh.write(frame.reference_pose.to_array().astype("<f8").tobytes())
            fh.write(pts.tobytes())
        for boxes in truth.frames:
            rec = np.zeros(len(boxes), dtype=BOX_RECORD)
            rec["params"] = boxes.params
            rec["class_id"] = boxes.class_id
            rec["instance_id"] = boxes.instance_id
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SequenceFormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_sequence(path) -> tuple[list[PointFrame], SceneTruth]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise SequenceFormatError("bad magic")
    version, n_frames = struct.unpack("<HI", r.take(6))
    if version != VERSION:
        raise SequenceFormatError(f"unsupported version {version}")
    frames = []
    for n in range(n_frames):
        (count,) = struct.unpack("<I", r.take(4))
        pose = Pose.from_array(np.frombuffer(r.take(96), dtype="<f8"))
        pts = np.frombuffer(r.take(20 * count), dtype="<f4").reshape(count, 5).astype(np.float32)
        frames.append(PointFrame(n, pts, pose))
    truth = SceneTruth()
    for _ in range(n_frames):
        (count,) = struct.unpack("<I", r.take(4))
        rec = np.frombuffer(r.take(BOX_RECORD.itemsize * count), dtype=BOX_RECORD)
        truth.frames.append(BoxSet(rec["params"].astype(np.float32), rec["class_id"].astype(np.uint32),
                                   rec["instance_id"].astype(np.uint32)))
    if r.pos != len(r.buf):
        raise SequenceFormatError("trailing bytes after truth records")
    return frames, truth
