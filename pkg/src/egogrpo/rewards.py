"""Hybrid reward: four exponential joint rewards plus the visual reward from
the perceptual scorer, and the contrastive training of that scorer."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from egogrpo.diffusion import (
    Denoiser,
    NoiseSchedule,
    SamplerConfig,
    condition_vector,
    sample_group,
    vector_to_motion,
)
from egogrpo.kinematics import (
    HeadTrajectory,
    MotionSequence,
    Skeleton,
    forward_kinematics,
    quat_to_matrix,
)
from egogrpo.numerics import Adam, Rng
from egogrpo.scorer import PerceptualScorer, head_features, skeleton_features

COMPONENTS = ("vis", "rot", "pos", "pos_aligned", "vel")


@dataclass
class RewardWeights:
    omega_vis: float = 1.0
    omega_rot: float = 1.0
    omega_pos: float = 1.0
    omega_pos_aligned: float = 0.5
    omega_vel: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass
class RewardBreakdown:
    r_vis: float
    r_rot: float
    r_pos: float
    r_pos_aligned: float
    r_vel: float

    @property
    def r_joint(self) -> float:
        return self.r_rot + self.r_pos + self.r_pos_aligned + self.r_vel

    @property
    def r_total(self) -> float:
        return self.r_vis + self.r_joint

    def components(self) -> np.ndarray:
        return np.array(astuple(self))


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


@dataclass
class Alignment:
    scale: np.ndarray        # (...,)
    rotation: np.ndarray     # (..., 3, 3)
    translation: np.ndarray  # (..., 3)
    aligned: np.ndarray      # (..., M, 3)
    degenerate: np.ndarray   # (...,) bool


def umeyama_align(pred, gt, rank_tol: float = 1e-9) -> Alignment:
    """Per-set least-squares similarity transform taking ``pred`` onto ``gt``.

    Works on ``(..., M, 3)`` arrays, one transform per leading index. Point
    sets whose centred spread has rank < 2 are left unaligned and flagged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"point sets differ in shape: {pred.shape} vs {gt.shape}")
    m = pred.shape[-2]
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    dp = pred - mu_p
    dg = gt - mu_g
    var_p = np.sum(dp * dp, axis=(-1, -2)) / m
    cov = np.matmul(np.swapaxes(dg, -1, -2), dp) / m
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign = np.where(sign == 0, 1.0, sign)
    fix = np.ones(d.shape)
    fix[..., 2] = sign
    rot = np.matmul(u * fix[..., None, :], vt)

    spread = np.linalg.svd(dp, compute_uv=False)
    degenerate = spread[..., 1] <= rank_tol * np.maximum(spread[..., 0], 1e-300)
    safe_var = np.where(degenerate, 1.0, var_p)
    scale = np.sum(d * fix, axis=-1) / safe_var
    trans = mu_g[..., 0, :] - scale[..., None] * np.einsum("...ij,...j->...i", rot, mu_p[..., 0, :])

    eye = np.broadcast_to(np.eye(3), rot.shape)
    rot = np.where(degenerate[..., None, None], eye, rot)
    scale = np.where(degenerate, 1.0, scale)
    trans = np.where(degenerate[..., None], 0.0, trans)
    aligned = scale[..., None, None] * np.matmul(pred, np.swapaxes(rot, -1, -2)) + trans[..., None, :]
    return Alignment(scale, rot, trans, aligned, degenerate)


# ---------------------------------------------------------------------------
# joint-level rewards
# ---------------------------------------------------------------------------


def frame_velocities(pos: np.ndarray) -> np.ndarray:
    """Per-frame displacement ``p_t - p_{t-1}``; frame 0 copies frame 1."""
    diff = pos[1:] - pos[:-1]
    return np.concatenate([diff[:1], diff], axis=0)


@dataclass
class JointErrors:
    """Frame-averaged mean-over-joints errors (meters, per-frame units)."""

    rot: float
    pos: float
    pos_aligned: float
    vel: float


def joint_errors(pred: MotionSequence, gt: MotionSequence, skel: Skeleton,
                 pred_pos=None, gt_pos=None) -> JointErrors:
    if pred.frames != gt.frames or pred.joint_count != gt.joint_count:
        raise ValueError(
            f"pred ({pred.frames}x{pred.joint_count}) and gt ({gt.frames}x{gt.joint_count}) differ"
        )
    if pred_pos is None:
        pred_pos, _ = forward_kinematics(skel, pred)
    if gt_pos is None:
        gt_pos, _ = forward_kinematics(skel, gt)
    r_pred = quat_to_matrix(pred.local_rot).reshape(pred.frames, pred.joint_count, 9)
    r_gt = quat_to_matrix(gt.local_rot).reshape(gt.frames, gt.joint_count, 9)
    rot = np.abs(r_pred - r_gt).sum(axis=-1).mean()
    pos = np.linalg.norm(pred_pos - gt_pos, axis=-1).mean()
    aligned = umeyama_align(pred_pos, gt_pos).aligned
    pos_al = np.linalg.norm(aligned - gt_pos, axis=-1).mean()
    vel = np.linalg.norm(frame_velocities(pred_pos) - frame_velocities(gt_pos), axis=-1).mean()
    return JointErrors(float(rot), float(pos), float(pos_al), float(vel))


def joint_rewards(pred: MotionSequence, gt: MotionSequence, skel: Skeleton, w: RewardWeights):
    """``(r_rot, r_pos, r_pos_aligned, r_vel)``, each ``exp(-omega * error)``."""
    return _exp_rewards(joint_errors(pred, gt, skel), w)


def visual_reward(s, w: RewardWeights):
    return np.exp(w.omega_vis * np.asarray(s, dtype=np.float64))


def total_reward(pred: MotionSequence, gt: MotionSequence, head: HeadTrajectory, skel: Skeleton,
                 scorer: PerceptualScorer, w: RewardWeights) -> RewardBreakdown:
    return group_rewards([pred], gt, head, skel, scorer, w)[0]


def group_rewards(preds: list[MotionSequence], gt: MotionSequence, head: HeadTrajectory,
                  skel: Skeleton, scorer: PerceptualScorer, w: RewardWeights) -> list[RewardBreakdown]:
    """Rewards for several predictions of the same target, scored in one batch."""
    feats = np.stack([skeleton_features(skel, p, head) for p in preds])
    hf = np.broadcast_to(head_features(head), (len(preds),) + (head.frames, 9))
    scores = scorer.forward(feats, hf)
    gt_pos, _ = forward_kinematics(skel, gt)
    out = []
    for p, s in zip(preds, scores):
        joint = _exp_rewards(joint_errors(p, gt, skel, gt_pos=gt_pos), w)
        out.append(RewardBreakdown(float(visual_reward(s, w)), *joint))
    return out


def _exp_rewards(e: JointErrors, w: RewardWeights):
    return (
        math.exp(-w.omega_rot * e.rot),
        math.exp(-w.omega_pos * e.pos),
        math.exp(-w.omega_pos_aligned * e.pos_aligned),
        math.exp(-w.omega_vel * e.vel),
    )


# ---------------------------------------------------------------------------
# contrastive training of the scorer
# ---------------------------------------------------------------------------


def infonce_from_scores(scores, delta: float = 0.07):
    """Loss and score-gradient with the positive at index 0."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("InfoNCE needs at least one negative")
    logits = scores / delta
    top = logits.max()
    lse = top + math.log(float(np.sum(np.exp(logits - top))))
    loss = lse - logits[0]
    p = np.exp(logits - lse)
    p[0] -= 1.0
    return float(loss), p / delta


def infonce_loss(scorer: PerceptualScorer, positive, negatives, delta: float = 0.07) -> float:
    """``positive`` and each negative are ``(skeleton_features, head_features)`` pairs."""
    if not negatives:
        raise ValueError("InfoNCE needs at least one negative")
    pairs = [positive, *negatives]
    body = np.stack([b for b, _ in pairs])
    heads = np.stack([h for _, h in pairs])
    return infonce_from_scores(scorer.forward(body, heads), delta)[0]


@dataclass
class HardNegative:
    features: np.ndarray  # (T, N, 7)
    step_index: int
    motion: MotionSequence


def make_hard_negatives(denoiser: Denoiser, heads: list[HeadTrajectory], sched: NoiseSchedule,
                        cfg: SamplerConfig, rng: Rng, skel: Skeleton,
                        step_choice: int | None = None, fps: float = 30.0) -> list[HardNegative]:
    """One policy sample per head, decoded from the clean-sample prediction at
    a step drawn uniformly from the final three sampling steps."""
    if not heads:
        return []
    conds = np.stack([condition_vector(h) for h in heads])
    inits = np.stack([rng.child("init", i).normal(denoiser.motion_dim) for i in range(len(heads))])
    members = [rng.child("member", i) for i in range(len(heads))]
    trajs = sample_group(denoiser, conds, cfg, sched, inits, members)
    n = cfg.steps
    lo = max(n - 3, 0)
    out = []
    for i, (h, tr) in enumerate(zip(heads, trajs)):
        k = step_choice if step_choice is not None else int(rng.child("pick", i).integers(lo, n))
        motion = vector_to_motion(tr.x0_preds[k], h, skel.joint_count, fps)
        out.append(HardNegative(skeleton_features(skel, motion, h), k, motion))
    return out


def train_scorer(scorer: PerceptualScorer, records, denoiser: Denoiser, steps: int, rng: Rng,
                 opt: Adam, sched: NoiseSchedule, cfg: SamplerConfig, skel: Skeleton,
                 negatives: int = 15, delta: float = 0.07) -> list[float]:
    """Each step contrasts one ground-truth pair against ``negatives`` fresh
    policy samples for the same head track. Returns the loss curve."""
    losses = []
    start = opt.step_count
    for i in range(steps):
        r = rng.child("step", start + i)
        rec = records[int(r.integers(0, len(records)))]
        negs = make_hard_negatives(denoiser, [rec.head] * negatives, sched, cfg, r.child("neg"), skel,
                                   fps=rec.motion.fps)
        body = np.stack([skeleton_features(skel, rec.motion, rec.head)] + [n.features for n in negs])
        hf = np.broadcast_to(head_features(rec.head), (len(body), rec.head.frames, 9))
        scores, cache = scorer.forward(body, hf, return_cache=True)
        loss, g = infonce_from_scores(scores, delta)
        opt.step(scorer.backward(cache, g))
        losses.append(loss)
    return losses
