import math

import numpy as np
import pytest

from egogrpo.kinematics import derive_head_trajectory, forward_kinematics, heading, quat_angle
from egogrpo.metrics import plausibility_metrics
from egogrpo.synthdata import (
    PARAM_RANGES, Dataset, DatasetFormatError, GaitParams, build_dataset, generate_walk, load_dataset,
    save_dataset, split_counts,
)


def test_standing_pose_is_static():
    m = generate_walk(GaitParams(stride_amplitude=0, forward_speed=0, bob_amplitude=0))
    assert np.allclose(m.root_pos, m.root_pos[0]) and np.allclose(m.local_rot, m.local_rot[0])


def test_forward_speed_distance():
    m = generate_walk(GaitParams(forward_speed=1.0), frames=31, fps=30)
    assert m.root_pos[-1, 0] - m.root_pos[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_full_turn_returns_to_initial_yaw():
    frames, fps = 31, 30.0
    m = generate_walk(GaitParams(turn_rate=2 * math.pi * fps / (frames - 1)), frames=frames, fps=fps)
    d = heading(m.root_rot[-1]) - heading(m.root_rot[0])
    assert abs(math.remainder(d, 2 * math.pi)) < 1e-9


def test_split_sizes():
    assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert build_dataset(10, frames=6).split_sizes() == {"train": 8, "val": 1, "test": 1}
    with pytest.raises(ValueError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        save_dataset(build_dataset(6, frames=5, seed=4), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_generated_feet_never_penetrate(skel):
    ds = build_dataset(200, seed=2)
    for rec in ds.records:
        gp, _ = plausibility_metrics(rec.motion, skel)
        assert gp == 0.0


def test_round_trip_is_exact(tmp_path, small_dataset):
    path = tmp_path / "ds.jsonl"
    save_dataset(small_dataset, path)
    back = load_dataset(path)
    assert len(back) == len(small_dataset) and back.seed == small_dataset.seed
    for a, b in zip(small_dataset.records, back.records):
        assert a.split == b.split
        for x, y in [(a.motion.root_rot, b.motion.root_rot), (a.motion.root_pos, b.motion.root_pos),
                     (a.motion.local_rot, b.motion.local_rot), (a.head.rot, b.head.rot), (a.head.pos, b.head.pos)]:
            assert np.array_equal(x, y)


def test_truncated_file_names_last_complete_record(tmp_path, small_dataset):
    path = tmp_path / "ds.jsonl"
    save_dataset(small_dataset, path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetFormatError, match="last complete record"):
        load_dataset(path)


def test_empty_dataset_round_trips(tmp_path):
    path = tmp_path / "empty.jsonl"
    save_dataset(Dataset([], 0), path)
    assert len(load_dataset(path)) == 0


def test_stored_head_matches_motion(skel, small_dataset):
    for rec in small_dataset.records:
        h = derive_head_trajectory(skel, rec.motion)
        assert np.allclose(h.pos, rec.head.pos, atol=1e-9) and np.allclose(h.rot, rec.head.rot, atol=1e-9)


def test_motion_is_smooth(skel):
    m = generate_walk(GaitParams())
    _, rot = forward_kinematics(skel, m)
    assert quat_angle(m.local_rot[1:], m.local_rot[:-1]).max() < 0.3
    assert quat_angle(rot[1:], rot[:-1]).max() < 0.3


def test_parameter_ranges_declared():
    assert PARAM_RANGES["stride_frequency"] == (0.6, 1.4)
    assert PARAM_RANGES["turn_rate"] == (-0.5, 0.5)
