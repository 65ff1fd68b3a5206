"""Trajectory-conditioned perceptual scorer.

Body joints and the head track are embedded per frame and per keypoint,
fused by cross-attention along time, refined by blocks of
MLP -> spatial attention (over joints) -> temporal attention (over frames),
then mean-pooled and mapped to a plausibility score in (0, 1).
"""
from __future__ import annotations

import numpy as np

from egogrpo.kinematics import (
    HeadTrajectory,
    MotionSequence,
    Skeleton,
    canonical_frame,
    forward_kinematics,
    invariant_condition,
    quat_normalize,
    to_frame,
)
from egogrpo.layers import Attention, Linear, sinusoid_table
from egogrpo.numerics import DimensionError, Mlp, Rng

JOINT_FEATURE_DIM = 7
HEAD_FEATURE_DIM = 9


def skeleton_features(skel: Skeleton, motion: MotionSequence, head: HeadTrajectory) -> np.ndarray:
    """``(T, N, 7)`` global joint quaternion + position, expressed in the
    canonical frame of the head track so the scorer sees the same coordinates
    as the conditioning features."""
    pos, rot = forward_kinematics(skel, motion)
    rot, pos = to_frame(canonical_frame(head), rot, pos)
    return np.concatenate([quat_normalize(rot), pos], axis=-1)


def head_features(head: HeadTrajectory) -> np.ndarray:
    return invariant_condition(head)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class PerceptualScorer:
    def __init__(self, joints: int, d: int = 32, blocks: int = 2, hidden: int = 64,
                 rng: Rng | None = None):
        self.joints, self.d, self.n_blocks, self.hidden = joints, d, blocks, hidden
        r = (lambda *lab: rng.child(*lab)) if rng is not None else (lambda *lab: None)
        self.embed_body = Linear(JOINT_FEATURE_DIM, d, r("embed_body"))
        self.embed_head = Linear(HEAD_FEATURE_DIM, d, r("embed_head"))
        self.body_keypoint = r("kp_body").normal((joints, d)) * 0.1 if rng else np.zeros((joints, d))
        self.head_keypoint = r("kp_head").normal((joints, d)) * 0.1 if rng else np.zeros((joints, d))
        self.cross = Attention(d, r("cross"), out_scale=0.5)
        self.blocks = []
        for i in range(blocks):
            mlp = Mlp.initialized([d, hidden, d], rng.child("mlp", i), output_scale=0.5) if rng else Mlp([d, hidden, d])
            self.blocks.append((
                mlp,
                Attention(d, r("spatial", i), out_scale=0.5),
                Attention(d, r("temporal", i), out_scale=0.5),
            ))
        self.score_head = Mlp.initialized([d, d, 1], rng.child("score")) if rng else Mlp([d, d, 1])

    @property
    def params(self) -> list[np.ndarray]:
        out = self.embed_body.params + self.embed_head.params + [self.body_keypoint, self.head_keypoint]
        out += self.cross.params
        for mlp, sa, ta in self.blocks:
            out += mlp.params + sa.params + ta.params
        return out + self.score_head.params

    def config_dims(self) -> list[int]:
        return [self.joints, self.d, self.n_blocks, self.hidden]

    def copy(self) -> "PerceptualScorer":
        other = PerceptualScorer(self.joints, self.d, self.n_blocks, self.hidden)
        for dst, src in zip(other.params, self.params):
            dst[...] = src
        return other

    def forward(self, body, head, return_cache: bool = False):
        """``body`` is ``(B, T, N, 7)``, ``head`` is ``(B, T, 9)``; returns ``(B,)``."""
        body = np.asarray(body, dtype=np.float64)
        head = np.asarray(head, dtype=np.float64)
        if body.ndim == 3:
            body, head = body[None], head[None]
        b, t, n, _ = body.shape
        if n != self.joints:
            raise DimensionError(f"scorer built for {self.joints} joints, got {n}")
        if head.shape != (b, t, HEAD_FEATURE_DIM):
            raise DimensionError(f"head features {head.shape} do not match body {body.shape}")
        pe = sinusoid_table(t, self.d)

        fb, c_eb = self.embed_body.forward(body)
        fb = fb + self.body_keypoint + pe[:, None, :]
        fh, c_eh = self.embed_head.forward(head)
        fh = fh[:, :, None, :] + self.head_keypoint + pe[:, None, :]

        y, c_ca = self.cross.forward(fb.transpose(0, 2, 1, 3), fh.transpose(0, 2, 1, 3))
        x = fb + y.transpose(0, 2, 1, 3)
        c_blocks = []
        for mlp, sa, ta in self.blocks:
            m, c_m = mlp.forward(x, return_cache=True)
            x = x + m
            y, c_sa = sa.forward(x, x)
            x = x + y
            xt = x.transpose(0, 2, 1, 3)
            y, c_ta = ta.forward(xt, xt)
            x = x + y.transpose(0, 2, 1, 3)
            c_blocks.append((c_m, c_sa, c_ta))
        pooled = x.mean(axis=(1, 2))
        logit, c_head = self.score_head.forward(pooled, return_cache=True)
        s = _sigmoid(logit[:, 0])
        if return_cache:
            return s, (body.shape, c_eb, c_eh, c_ca, c_blocks, c_head, s)
        return s

    def backward(self, cache, grad_scores) -> list[np.ndarray]:
        shape, c_eb, c_eh, c_ca, c_blocks, c_head, s = cache
        b, t, n, _ = shape
        g_logit = (np.asarray(grad_scores, dtype=np.float64) * s * (1.0 - s))[:, None]
        g_head_params, g_pool = self.score_head.backward(c_head, g_logit)
        gx = np.broadcast_to(g_pool[:, None, None, :] / (t * n), (b, t, n, self.d)).copy()

        block_grads = []
        for (mlp, sa, ta), (c_m, c_sa, c_ta) in zip(reversed(self.blocks), reversed(c_blocks)):
            g_ta, gq, gkv = ta.backward(c_ta, gx.transpose(0, 2, 1, 3))
            gx = gx + (gq + gkv).transpose(0, 2, 1, 3)
            g_sa, gq, gkv = sa.backward(c_sa, gx)
            gx = gx + gq + gkv
            g_mlp, gin = mlp.backward(c_m, gx)
            gx = gx + gin
            block_grads.append(g_mlp + g_sa + g_ta)

        g_ca, gq, gkv = self.cross.backward(c_ca, gx.transpose(0, 2, 1, 3))
        g_fb = gx + gq.transpose(0, 2, 1, 3)
        g_fh = gkv.transpose(0, 2, 1, 3)
        g_eb, _ = self.embed_body.backward(c_eb, g_fb)
        g_eh, _ = self.embed_head.backward(c_eh, g_fh.sum(axis=2))
        grads = g_eb + g_eh + [g_fb.sum(axis=(0, 1)), g_fh.sum(axis=(0, 1))] + g_ca
        for g in reversed(block_grads):
            grads += g
        return grads + g_head_params


def scorer_forward(scorer: PerceptualScorer, skel_feats, head: HeadTrajectory) -> float:
    return float(scorer.forward(skel_feats, head_features(head))[0])
