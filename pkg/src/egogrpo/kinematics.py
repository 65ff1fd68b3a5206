"""Quaternion helpers, the toy skeleton, forward kinematics and the
yaw/horizontal canonicalization used to build conditioning features.

Conventions: quaternions are ``(w, x, y, z)`` Hamilton products, z is up and
the ground is the plane ``z = 0``. Per-frame poses are stored as arrays
(``rot`` of shape ``(T, 4)``, ``pos`` of shape ``(T, 3)``) rather than lists of
:class:`SE3` objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from egogrpo import kernels


class JointCountError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternion algebra (all broadcast over leading axes)
# ---------------------------------------------------------------------------

quat_mul = kernels.quat_mul
quat_rotate = kernels.quat_rotate


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q, eps: float = 1e-12):
    """Unit norm, sign chosen so the first non-zero component is positive
    (``w >= 0`` in all but the 180-degree case). Near-zero quaternions map to
    the identity."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    ident = np.zeros_like(q)
    ident[..., 0] = 1.0
    out = np.where(n > eps, q / np.maximum(n, eps), ident)
    nz = out != 0.0
    first = np.take_along_axis(out, np.argmax(nz, axis=-1)[..., None], axis=-1)
    return np.where(first < 0.0, -out, out)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def yaw_quat(angle):
    return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), angle)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to canonical quaternion (Shepperd's branch selection)."""
    m = np.asarray(m, dtype=np.float64)
    lead = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=-1)
    k = np.argmax(cand, axis=-1)
    q = np.empty((m.shape[0], 4))
    for i in range(m.shape[0]):
        r = m[i]
        if k[i] == 0:
            s = 2.0 * np.sqrt(max(1.0 + tr[i], 0.0))
            q[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif k[i] == 1:
            s = 2.0 * np.sqrt(max(1.0 + r[0, 0] - r[1, 1] - r[2, 2], 0.0))
            q[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif k[i] == 2:
            s = 2.0 * np.sqrt(max(1.0 + r[1, 1] - r[0, 0] - r[2, 2], 0.0))
            q[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(max(1.0 + r[2, 2] - r[0, 0] - r[1, 1], 0.0))
            q[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return quat_normalize(q).reshape(lead + (4,))


def quat_angle(a, b):
    """Geodesic angle (radians) between two rotations."""
    d = np.abs(np.sum(quat_normalize(a) * quat_normalize(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def heading(q):
    """Yaw of the rotated x axis projected on the ground plane."""
    fwd = quat_rotate(q, np.array([1.0, 0.0, 0.0]))
    return np.arctan2(fwd[..., 1], fwd[..., 0])


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def identity(cls) -> "SE3":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    def compose(self, other: "SE3") -> "SE3":
        return SE3(quat_mul(self.rotation, other.rotation),
                   self.translation + quat_rotate(self.rotation, other.translation))

    def inverse(self) -> "SE3":
        qi = quat_conj(self.rotation)
        return SE3(qi, -quat_rotate(qi, self.translation))

    def apply(self, points):
        return quat_rotate(self.rotation, points) + self.translation


@dataclass
class Skeleton:
    parent: np.ndarray
    offset: np.ndarray
    head_index: int
    foot_indices: tuple[int, int]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        n = len(self.parent)
        if self.offset.shape != (n, 3):
            raise ValueError(f"offset shape {self.offset.shape} does not match {n} joints")
        roots = [j for j in range(n) if self.parent[j] < 0]
        if roots != [0]:
            raise ValueError("skeleton must have exactly one root at index 0")
        for j in range(1, n):
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"joint {j} has parent {self.parent[j]}; parents must precede children")
        for idx in (self.head_index, *self.foot_indices):
            if not 0 <= idx < n:
                raise ValueError(f"joint index {idx} out of range")

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @classmethod
    def default(cls) -> "Skeleton":
        names = ("pelvis", "spine", "neck", "head", "l_hip", "l_foot", "r_hip", "r_foot")
        parent = [-1, 0, 1, 2, 0, 4, 0, 6]
        offset = [
            [0, 0, 0],
            [0, 0, 0.25],
            [0, 0, 0.25],
            [0, 0, 0.15],
            [0, 0.12, 0],
            [0, 0, -0.85],
            [0, -0.12, 0],
            [0, 0, -0.85],
        ]
        return cls(parent, offset, head_index=3, foot_indices=(5, 7), names=names)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.joint_count, 3))
        for j in range(1, self.joint_count):
            pos[j] = pos[self.parent[j]] + self.offset[j]
        return pos


@dataclass
class MotionSequence:
    """Root track plus per-joint local rotations for ``T`` frames."""

    root_rot: np.ndarray   # (T, 4)
    root_pos: np.ndarray   # (T, 3)
    local_rot: np.ndarray  # (T, N, 4)
    fps: float = 30.0

    def __post_init__(self):
        self.root_rot = np.asarray(self.root_rot, dtype=np.float64)
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.local_rot = np.asarray(self.local_rot, dtype=np.float64)
        t = self.root_rot.shape[0]
        if self.root_pos.shape != (t, 3) or self.local_rot.shape[0] != t or self.local_rot.shape[-1] != 4:
            raise ValueError("inconsistent motion array shapes")

    @property
    def frames(self) -> int:
        return self.root_rot.shape[0]

    @property
    def joint_count(self) -> int:
        return self.local_rot.shape[1]

    def copy(self) -> "MotionSequence":
        return MotionSequence(self.root_rot.copy(), self.root_pos.copy(), self.local_rot.copy(), self.fps)


@dataclass
class HeadTrajectory:
    rot: np.ndarray  # (T, 4)
    pos: np.ndarray  # (T, 3)

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if self.rot.shape[0] != self.pos.shape[0]:
            raise ValueError("rotation and translation tracks differ in length")

    @property
    def frames(self) -> int:
        return self.rot.shape[0]

    def pose(self, t: int) -> SE3:
        return SE3(self.rot[t], self.pos[t])


CONDITION_DIM = 9


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def forward_kinematics(skel: Skeleton, motion: MotionSequence):
    """Global joint positions ``(T, N, 3)`` and rotations ``(T, N, 4)``."""
    if motion.joint_count != skel.joint_count:
        raise JointCountError(
            f"motion has {motion.joint_count} joints, skeleton has {skel.joint_count}"
        )
    return kernels.forward_kinematics(skel.parent, skel.offset, motion.root_rot,
                                      motion.root_pos, motion.local_rot)


def derive_head_trajectory(skel: Skeleton, motion: MotionSequence) -> HeadTrajectory:
    pos, rot = forward_kinematics(skel, motion)
    h = skel.head_index
    return HeadTrajectory(quat_normalize(rot[:, h]), pos[:, h].copy())


def canonical_frame(h: HeadTrajectory) -> SE3:
    """Yaw plus horizontal translation of the first head pose."""
    yaw = heading(h.rot[0])
    t = np.array([h.pos[0, 0], h.pos[0, 1], 0.0])
    return SE3(yaw_quat(yaw), t)


def to_frame(frame: SE3, rot, pos):
    """Express world rotations/positions in ``frame`` coordinates."""
    qi = quat_conj(frame.rotation)
    return quat_mul(qi, rot), quat_rotate(qi, np.asarray(pos) - frame.translation)


def from_frame(frame: SE3, rot, pos):
    return quat_mul(frame.rotation, rot), quat_rotate(frame.rotation, pos) + frame.translation


def invariant_condition(h: HeadTrajectory) -> np.ndarray:
    """Per-frame 9-vector: first two rotation-matrix columns and translation,
    both expressed in the canonical frame of the first head pose."""
    if h.frames < 1:
        raise ValueError("empty head trajectory")
    rot, pos = to_frame(canonical_frame(h), h.rot, h.pos)
    m = quat_to_matrix(rot)
    six = np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)
    return np.concatenate([six, pos], axis=-1)


def transform_head(h: HeadTrajectory, frame: SE3) -> HeadTrajectory:
    """Pre-compose a rigid transform onto every head pose."""
    rot, pos = from_frame(frame, h.rot, h.pos)
    return HeadTrajectory(quat_normalize(rot), pos)


def transform_motion(m: MotionSequence, frame: SE3) -> MotionSequence:
    rot, pos = from_frame(frame, m.root_rot, m.root_pos)
    return MotionSequence(quat_normalize(rot), pos, m.local_rot.copy(), m.fps)
