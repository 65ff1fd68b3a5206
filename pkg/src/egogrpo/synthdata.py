"""Procedural walking motions paired with the head track they induce, plus a
JSON-lines dataset format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from egogrpo.kinematics import (
    HeadTrajectory,
    MotionSequence,
    Skeleton,
    derive_head_trajectory,
    quat_from_axis_angle,
    quat_normalize,
    yaw_quat,
)
from egogrpo.numerics import Rng

SPLITS = ("train", "val", "test")

# sampling envelope for build_dataset
PARAM_RANGES = {
    "stride_frequency": (0.6, 1.4),
    "stride_amplitude": (0.2, 0.6),
    "forward_speed": (0.4, 1.4),
    "turn_rate": (-0.5, 0.5),
    "bob_amplitude": (0.01, 0.04),
}

LEG_LENGTH = 0.85
FOOT_CLEARANCE = 0.002
_Y = np.array([0.0, 1.0, 0.0])
_X = np.array([1.0, 0.0, 0.0])


class DatasetFormatError(ValueError):
    pass


@dataclass
class GaitParams:
    stride_frequency: float = 1.0
    stride_amplitude: float = 0.4
    forward_speed: float = 0.9
    turn_rate: float = 0.0
    bob_amplitude: float = 0.025
    phase_left: float = 0.0
    phase_right: float = math.pi
    heading: float = 0.0
    start_x: float = 0.0
    start_y: float = 0.0

    def validate(self) -> None:
        if not self.stride_frequency > 0:
            raise ValueError(f"stride_frequency must be > 0, got {self.stride_frequency}")
        for name in ("stride_amplitude", "bob_amplitude", "forward_speed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not all(math.isfinite(v) for v in vars(self).values()):
            raise ValueError("gait parameters must be finite")


def generate_walk(params: GaitParams, frames: int = 32, fps: float = 30.0,
                  skel: Skeleton | None = None) -> MotionSequence:
    """Sinusoidal gait on the default skeleton topology.

    Hips pitch in antiphase, the pelvis height tracks the leg geometry so the
    lower foot rests just above the floor, the spine sways with the stride and
    the head nods at twice the stride frequency.
    """
    params.validate()
    if frames < 4:
        raise ValueError("need at least 4 frames")
    skel = skel or Skeleton.default()
    if skel.joint_count != 8:
        raise ValueError("generate_walk drives the default 8-joint skeleton")

    t = np.arange(frames) / fps
    phase = 2.0 * math.pi * params.stride_frequency * t
    amp = params.stride_amplitude
    # nod and bob fade out for very short strides so a standing pose is static
    gait = min(1.0, amp / 0.2)
    a_left = amp * np.sin(phase + params.phase_left)
    a_right = amp * np.sin(phase + params.phase_right)

    local = np.zeros((frames, 8, 4))
    local[..., 0] = 1.0
    local[:, 1] = quat_from_axis_angle(_X, 0.25 * amp * np.sin(phase + params.phase_left))
    local[:, 3] = quat_from_axis_angle(_Y, 0.05 * gait * np.sin(2.0 * (phase + params.phase_left)))
    local[:, 4] = quat_from_axis_angle(_Y, a_left)
    local[:, 6] = quat_from_axis_angle(_Y, a_right)

    yaw = params.heading + params.turn_rate * t
    v, w = params.forward_speed, params.turn_rate
    if abs(w) < 1e-12:
        x = params.start_x + v * t * math.cos(params.heading)
        y = params.start_y + v * t * math.sin(params.heading)
    else:
        x = params.start_x + (v / w) * (np.sin(yaw) - math.sin(params.heading))
        y = params.start_y - (v / w) * (np.cos(yaw) - math.cos(params.heading))
    bob = gait * params.bob_amplitude * (0.5 + 0.5 * np.cos(2.0 * (phase + params.phase_left)))
    z = LEG_LENGTH * np.maximum(np.cos(a_left), np.cos(a_right)) + FOOT_CLEARANCE + bob

    root_rot = quat_normalize(yaw_quat(yaw))
    return MotionSequence(root_rot, np.stack([x, y, z], axis=-1), quat_normalize(local), fps)


@dataclass
class Record:
    motion: MotionSequence
    head: HeadTrajectory
    split: str = "train"


@dataclass
class Dataset:
    records: list[Record] = field(default_factory=list)
    seed: int | None = None

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}

    def __len__(self) -> int:
        return len(self.records)


def sample_params(rng: Rng) -> GaitParams:
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES.items()}
    left = float(rng.uniform(0.0, 2.0 * math.pi))
    return GaitParams(
        **vals,
        phase_left=left,
        phase_right=left + math.pi,
        heading=float(rng.uniform(-math.pi, math.pi)),
        start_x=float(rng.uniform(-2.0, 2.0)),
        start_y=float(rng.uniform(-2.0, 2.0)),
    )


def split_counts(count: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(round(count * fractions[0]))
    n_val = min(int(round(count * fractions[1])), count - n_train)
    return [n_train, n_val, count - n_train - n_val]


def build_dataset(count: int, frames: int = 32, fps: float = 30.0, seed: int = 0,
                  split_fractions=(0.8, 0.1, 0.1), skel: Skeleton | None = None) -> Dataset:
    sizes = split_counts(count, split_fractions)
    labels = [s for s, n in zip(SPLITS, sizes) for _ in range(n)]
    skel = skel or Skeleton.default()
    root = Rng(seed).child("dataset")
    records = []
    for i in range(count):
        motion = generate_walk(sample_params(root.child("record", i)), frames, fps, skel)
        records.append(Record(motion, derive_head_trajectory(skel, motion), labels[i]))
    return Dataset(records, seed)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _pose_rows(rot, pos):
    return np.concatenate([rot, pos], axis=-1).tolist()


def record_to_json(rec: Record, seed) -> str:
    m = rec.motion
    obj = {
        "fps": float(m.fps),
        "frames": m.frames,
        "root": _pose_rows(m.root_rot, m.root_pos),
        "local_rot": m.local_rot.reshape(m.frames, -1).tolist(),
        "head": _pose_rows(rec.head.rot, rec.head.pos),
        "split": rec.split,
        "seed": seed,
    }
    return json.dumps(obj, separators=(",", ":"))


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in ds.records:
            fh.write(record_to_json(rec, ds.seed))
            fh.write("\n")


def _record_from_obj(obj) -> tuple[Record, object]:
    frames = int(obj["frames"])
    root = np.asarray(obj["root"], dtype=np.float64)
    local = np.asarray(obj["local_rot"], dtype=np.float64)
    head = np.asarray(obj["head"], dtype=np.float64)
    if root.shape != (frames, 7) or head.shape != (frames, 7):
        raise ValueError("root/head tracks must be frames x 7")
    if local.ndim != 2 or local.shape[0] != frames or local.shape[1] % 4:
        raise ValueError("local_rot must be frames x (4 * joints)")
    if obj["split"] not in SPLITS:
        raise ValueError(f"unknown split {obj['split']!r}")
    motion = MotionSequence(root[:, :4], root[:, 4:], local.reshape(frames, -1, 4), float(obj["fps"]))
    return Record(motion, HeadTrajectory(head[:, :4], head[:, 4:]), obj["split"]), obj.get("seed")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    records, seed = [], None
    for i, line in enumerate(lines):
        try:
            rec, seed = _record_from_obj(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            last = f"last complete record is {i - 1}" if i else "no complete records"
            raise DatasetFormatError(f"{path}: malformed record {i} ({exc}); {last}") from exc
        records.append(rec)
    return Dataset(records, seed)
