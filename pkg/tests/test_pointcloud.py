import math

import numpy as np
import pytest

from dalign.pointcloud import (
    BoxSet,
    PointFrame,
    Pose,
    SceneConfig,
    SceneTruth,
    SequenceFormatError,
    Sweep,
    _Actor,
    _sample_box_surface,
    assemble_frame,
    build_frames,
    ego_compensate,
    expected_points,
    frames_in_target_coords,
    generate_scene,
    read_sequence,
    transform_frame,
    write_sequence,
)

SMALL = SceneConfig(half_extent=12.8, n_objects=4, n_distractors=1, sweeps_per_frame=4, n_frames=2)


def random_pose(rng):
    return Pose.from_xy_yaw(*rng.uniform(-20, 20, size=2), rng.uniform(-math.pi, math.pi), rng.uniform(-1, 1))


def test_pose_identity_and_translation():
    pts = np.random.default_rng(0).normal(size=(5, 4))
    pose = random_pose(np.random.default_rng(1))
    same = ego_compensate(Sweep(0.0, pts, pose), pose)
    np.testing.assert_allclose(same.points, pts, atol=1e-12)
    moved = ego_compensate(Sweep(0.0, np.zeros((1, 4)), Pose.from_xy_yaw(1.0, 0.0, 0.0)), Pose.identity())
    np.testing.assert_allclose(moved.points[0, :3], [1.0, 0.0, 0.0])


def test_ego_compensation_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        pts = np.column_stack([rng.uniform(-40, 40, size=(50, 3)), rng.uniform(size=50)])
        there = ego_compensate(Sweep(0.1, pts, a), b)
        back = ego_compensate(there, a)
        assert np.max(np.abs(back.points - pts)) < 1e-9
        # reflectance and timestamp untouched; distances preserved
        np.testing.assert_array_equal(there.points[:, 3], pts[:, 3])
        assert there.timestamp == 0.1
        d0 = np.linalg.norm(pts[:1, :3] - pts[1:, :3], axis=1)
        d1 = np.linalg.norm(there.points[:1, :3] - there.points[1:, :3], axis=1)
        assert np.max(np.abs(d0 - d1)) < 1e-9


def test_non_orthonormal_pose_rejected():
    bad = Pose(np.diag([1.0, 2.0, 1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        ego_compensate(Sweep(0.0, np.zeros((1, 4)), bad), Pose.identity())


def test_world_static_point_consistent_after_compensation():
    rng = np.random.default_rng(3)
    world = np.array([[5.0, -3.0, 1.0]])
    for _ in range(10):
        a, b = random_pose(rng), random_pose(rng)
        pa = np.column_stack([a.inverse().apply(world), [0.5]])
        pb = np.column_stack([b.inverse().apply(world), [0.5]])
        target = random_pose(rng)
        qa = ego_compensate(Sweep(0.0, pa, a), target).points
        qb = ego_compensate(Sweep(0.05, pb, b), target).points
        assert np.max(np.abs(qa - qb)) < 1e-9


def test_dt_values_at_default_rate():
    cfg = SceneConfig(n_objects=3, n_distractors=0, n_frames=1)
    sweeps, _ = generate_scene(cfg, 0)
    frame = build_frames(sweeps)[0]
    dts = np.unique(frame.points[:, 4])
    np.testing.assert_array_equal(dts, np.array([m * 0.05 for m in range(10)], dtype=np.float32))
    assert dts.min() >= 0 and dts.max() < 0.5
    assert len(frame.points) == sum(len(s.points) for s in sweeps[0])


def test_single_sweep_frame_and_empty():
    pts = np.ones((3, 4))
    f = assemble_frame([Sweep(1.0, pts, Pose.identity())])
    assert np.all(f.points[:, 4] == 0)
    with pytest.raises(ValueError):
        assemble_frame([])


def test_generate_deterministic():
    a, ta = generate_scene(SMALL, 7)
    b, tb = generate_scene(SMALL, 7)
    for ga, gb in zip(a, b):
        for sa, sb in zip(ga, gb):
            np.testing.assert_array_equal(sa.points, sb.points)
            assert sa.timestamp == sb.timestamp
    for x, y in zip(ta.frames, tb.frames):
        np.testing.assert_array_equal(x.params, y.params)


def test_static_scene_has_fixed_world_centers():
    cfg = SceneConfig(n_objects=5, speed_range=(0.0, 0.0), sweeps_per_frame=2, n_frames=3)
    sweeps, truth = generate_scene(cfg, 4)
    centers = []
    for group, boxes in zip(sweeps, truth.frames):
        key = group[-1].ego_pose
        centers.append(key.apply(boxes.params[:, :3].astype(np.float64)))
    for c in centers[1:]:
        assert np.max(np.abs(c - centers[0])) < 1e-4  # float32 storage


def test_trajectories_continuous():
    cfg = SceneConfig(n_objects=8, n_frames=3, sweeps_per_frame=10)
    sweeps, truth = generate_scene(cfg, 5)
    v_max = cfg.speed_range[1]
    world = [g[-1].ego_pose.apply(b.params[:, :3].astype(np.float64)) for g, b in zip(sweeps, truth.frames)]
    for a, b in zip(world, world[1:]):
        assert np.all(np.linalg.norm(a[:, :2] - b[:, :2], axis=1) <= v_max * cfg.frame_duration + 1e-3)


def test_point_density_matches_sampling_model():
    # one box broadside at 10 m: mean Poisson count over 100 seeds vs the expected count
    size = np.array([4.0, 1.8, 1.5])
    actor = _Actor(0, size, 0.0, 10.0, 0.0, 0.0, 0.0, 0.5)
    sensor = np.zeros(2)
    lam, faces = expected_points(size, np.array([0.0, 10.0]), 0.0, sensor, 2.0)
    assert {f for f, _ in faces} == {3, 4}
    counts = [len(_sample_box_surface(np.random.default_rng(s), actor, 0.0, sensor, 2.0, 0.0, 1.0))
              for s in range(100)]
    assert abs(np.mean(counts) - lam) <= 0.2 * lam
    # the model itself: density x visible area x (10 / range)^2
    assert lam == pytest.approx(2.0 * (4.0 * 1.5 + 4.0 * 1.8))


def test_invalid_config():
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(n_objects=-1), 0)
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(speed_range=(-1.0, 2.0)), 0)


def test_frames_in_target_coords_order():
    sweeps, _ = generate_scene(SMALL, 8)
    frames = build_frames(sweeps)
    out = frames_in_target_coords(frames, 2)
    assert out[0] is frames[-1]
    assert out[1].frame_index == frames[-2].frame_index
    assert out[1].reference_pose is frames[-1].reference_pose
    with pytest.raises(ValueError):
        frames_in_target_coords(frames, 3)
    back = transform_frame(out[1], frames[-2].reference_pose)
    np.testing.assert_allclose(back.points, frames[-2].points, atol=1e-4)


def test_sequence_round_trip(tmp_path):
    sweeps, truth = generate_scene(SMALL, 9)
    frames = build_frames(sweeps)
    path = tmp_path / "s.daln"
    write_sequence(frames, truth, path)
    frames2, truth2 = read_sequence(path)
    for a, b in zip(frames, frames2):
        assert a.points.tobytes() == b.points.tobytes()
        assert a.reference_pose.to_array().tobytes() == b.reference_pose.to_array().tobytes()
    for a, b in zip(truth.frames, truth2.frames):
        assert a.params.tobytes() == b.params.tobytes()
        np.testing.assert_array_equal(a.class_id, b.class_id)
        np.testing.assert_array_equal(a.instance_id, b.instance_id)
    path2 = tmp_path / "s2.daln"
    write_sequence(frames2, truth2, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_empty_sequence(tmp_path):
    path = tmp_path / "e.daln"
    write_sequence([], SceneTruth(), path)
    assert path.stat().st_size == 10
    frames, truth = read_sequence(path)
    assert frames == [] and truth.frames == []


def test_format_errors(tmp_path):
    frame = PointFrame(0, np.ones((3, 5), np.float32), Pose.identity())
    path = tmp_path / "f.daln"
    write_sequence([frame], SceneTruth([BoxSet.empty()]), path)
    raw = path.read_bytes()
    cases = {
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + (9).to_bytes(2, "little") + raw[6:],
        "truncated": raw[:-3],
        "trailing": raw + b"\0",
    }
    for name, data in cases.items():
        p = tmp_path / f"{name}.daln"
        p.write_bytes(data)
        with pytest.raises(SequenceFormatError):
            read_sequence(p)
    with pytest.raises(ValueError):
        write_sequence([frame], SceneTruth(), tmp_path / "x.daln")
