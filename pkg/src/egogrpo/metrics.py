"""Evaluation metrics: joint accuracy, dynamics, physical plausibility, group
diversity and scorer discrimination."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from egogrpo import kernels
from egogrpo.kinematics import MotionSequence, Skeleton, forward_kinematics, quat_angle, quat_to_matrix
from egogrpo.rewards import umeyama_align

REPORT_COLUMNS = ("MPJPE", "PA-MPJPE", "MPJVE", "MPJRE", "Jitter", "GP", "FS")


def _check_pair(pred: MotionSequence, gt: MotionSequence):
    if pred.frames != gt.frames or pred.joint_count != gt.joint_count:
        raise ValueError(
            f"shape mismatch: pred {pred.frames}x{pred.joint_count}, gt {gt.frames}x{gt.joint_count}"
        )


def position_metrics(pred: MotionSequence, gt: MotionSequence, skel: Skeleton):
    """``(MPJPE, PA-MPJPE)`` in millimetres."""
    _check_pair(pred, gt)
    p, _ = forward_kinematics(skel, pred)
    g, _ = forward_kinematics(skel, gt)
    return position_errors(p, g)


def position_errors(pred_pos, gt_pos):
    """``(MPJPE, PA-MPJPE)`` in millimetres for ``(T, N, 3)`` positions in metres."""
    p = np.asarray(pred_pos, dtype=np.float64)
    g = np.asarray(gt_pos, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    mpjpe = np.linalg.norm(p - g, axis=-1).mean()
    aligned = umeyama_align(p, g).aligned
    pa = np.linalg.norm(aligned - g, axis=-1).mean()
    return 1000.0 * float(mpjpe), 1000.0 * float(pa)


def _velocity(pos):
    v = np.diff(pos, axis=0)
    return np.concatenate([v[:1], v], axis=0)


def dynamics_metrics(pred: MotionSequence, gt: MotionSequence, skel: Skeleton, fps: float | None = None,
                     rotation_mode: str = "l1"):
    """``(MPJVE mm/s, MPJRE, Jitter m/s^3)``.

    ``rotation_mode="l1"`` gives the mean L1 distance between local rotation
    matrices; ``"geodesic"`` gives the mean rotation angle in degrees.
    """
    _check_pair(pred, gt)
    if pred.frames < 4:
        raise ValueError("dynamics metrics need at least 4 frames")
    fps = pred.fps if fps is None else fps
    p, _ = forward_kinematics(skel, pred)
    g, _ = forward_kinematics(skel, gt)
    mpjve = 1000.0 * fps * np.linalg.norm(_velocity(p) - _velocity(g), axis=-1).mean()
    if rotation_mode == "l1":
        mpjre = np.abs(quat_to_matrix(pred.local_rot) - quat_to_matrix(gt.local_rot)).sum(axis=(-1, -2)).mean()
    elif rotation_mode == "geodesic":
        mpjre = np.degrees(quat_angle(pred.local_rot, gt.local_rot)).mean()
    else:
        raise ValueError(f"unknown rotation mode {rotation_mode!r}")
    return float(mpjve), float(mpjre), jitter(p, fps)


def jitter(pos: np.ndarray, fps: float) -> float:
    """Mean magnitude of the third forward difference, scaled to per-second^3."""
    jerk = pos[3:] - 3.0 * pos[2:-1] + 3.0 * pos[1:-2] - pos[:-3]
    return float(np.linalg.norm(jerk, axis=-1).mean() * fps ** 3)


def plausibility_metrics(pred: MotionSequence, skel: Skeleton, contact_threshold: float = 0.02):
    """``(GP, FS)`` in metres: summed ground penetration over all joints, and
    summed horizontal foot travel over frames where the foot is in contact."""
    if contact_threshold <= 0:
        raise ValueError("contact threshold must be positive")
    p, _ = forward_kinematics(skel, pred)
    gp = np.maximum(0.0, -p[..., 2]).sum()
    feet = p[:, list(skel.foot_indices)]
    step = np.linalg.norm(_velocity(feet)[..., :2], axis=-1)
    contact = feet[..., 2] < contact_threshold
    return float(gp), float(step[contact].sum())


def diversity(group) -> float:
    """Mean pairwise Euclidean distance between flattened samples."""
    x = np.asarray([np.ravel(g) for g in group], dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("diversity needs at least two samples")
    return kernels.mean_pairwise_distance(x)


def scorer_accuracy(scorer, pool):
    """``(accuracy, wrong_count)`` over ``(gt_body, gen_body, head)`` triples.

    ``scorer`` is a :class:`~egogrpo.scorer.PerceptualScorer` or any callable
    mapping ``(bodies, heads)`` batches to scores. Ties count as wrong.
    """
    if not pool:
        raise ValueError("empty evaluation pool")
    fn = scorer.forward if hasattr(scorer, "forward") else scorer
    correct = 0
    for gt_body, gen_body, head in pool:
        s = np.asarray(fn(np.stack([gt_body, gen_body]), np.stack([head, head])))
        correct += bool(s[0] > s[1])
    return correct / len(pool), len(pool) - correct


@dataclass
class SequenceMetrics:
    mpjpe: float
    pa_mpjpe: float
    mpjve: float
    mpjre: float
    jitter: float
    gp: float
    fs: float

    def row(self):
        return [self.mpjpe, self.pa_mpjpe, self.mpjve, self.mpjre, self.jitter, self.gp, self.fs]


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    mpjve: float
    mpjre: float
    jitter: float
    gp: float
    fs: float
    per_sequence: list[SequenceMetrics] = field(default_factory=list)

    def row(self):
        return [self.mpjpe, self.pa_mpjpe, self.mpjve, self.mpjre, self.jitter, self.gp, self.fs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow([repr(float(v)) for v in self.row()])
        return buf.getvalue()

    def per_sequence_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sequence",) + REPORT_COLUMNS)
        for i, m in enumerate(self.per_sequence):
            w.writerow([i] + [repr(float(v)) for v in m.row()])
        return buf.getvalue()


def evaluate(preds, gts, skel: Skeleton, fps: float = 30.0, contact_threshold: float = 0.02,
             rotation_mode: str = "l1") -> EvalReport:
    rows = []
    for p, g in zip(preds, gts, strict=True):
        mpjpe, pa = position_metrics(p, g, skel)
        mpjve, mpjre, jit = dynamics_metrics(p, g, skel, fps, rotation_mode)
        gp, fs = plausibility_metrics(p, skel, contact_threshold)
        rows.append(SequenceMetrics(mpjpe, pa, mpjve, mpjre, jit, gp, fs))
    if not rows:
        raise ValueError("nothing to evaluate")
    means = np.mean([r.row() for r in rows], axis=0)
    return EvalReport(*[float(v) for v in means], per_sequence=rows)


def report_dict(report: EvalReport) -> dict:
    d = asdict(report)
    d.pop("per_sequence")
    return d
