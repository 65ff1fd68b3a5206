import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egogrpo.diffusion import Denoiser, SamplerConfig, build_schedule, vector_to_motion
from egogrpo.kinematics import SE3, forward_kinematics, quat_from_axis_angle, transform_motion
from egogrpo.numerics import Adam, Rng
from egogrpo.rewards import (
    RewardWeights, infonce_from_scores, infonce_loss, joint_errors, joint_rewards, make_hard_negatives,
    total_reward, train_scorer, umeyama_align, visual_reward,
)
from egogrpo.scorer import PerceptualScorer, head_features, skeleton_features
from oracles import random_rotation, rotation_z

ONES = RewardWeights(1.0, 1.0, 1.0, 1.0, 1.0)


def _residual(a, gt):
    return float(np.sum((a - gt) ** 2))


# --- alignment -------------------------------------------------------------

def test_umeyama_identity():
    p = Rng(0).normal((6, 3))
    al = umeyama_align(p, p)
    assert al.scale == pytest.approx(1.0) and np.allclose(al.rotation, np.eye(3))
    assert np.allclose(al.translation, 0.0, atol=1e-12) and _residual(al.aligned, p) < 1e-20


def test_umeyama_recovers_known_similarity():
    gt = Rng(1).normal((8, 3))
    pred = 2.0 * gt @ rotation_z(math.pi / 2).T + np.array([1.0, 0, 0])
    al = umeyama_align(pred, gt)
    assert al.scale == pytest.approx(0.5)
    assert np.allclose(al.rotation, rotation_z(-math.pi / 2), atol=1e-12)
    assert _residual(al.aligned, gt) < 1e-9


def test_umeyama_refuses_reflections():
    gt = Rng(2).normal((10, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    al = umeyama_align(mirrored, gt)
    assert np.linalg.det(al.rotation) == pytest.approx(1.0)
    res = _residual(al.aligned, gt)
    assert res > 1e-3
    # no proper similarity from a random search does better
    rng = np.random.default_rng(0)
    for _ in range(300):
        r = random_rotation(rng)
        s = rng.uniform(0.5, 1.5)
        cand = s * mirrored @ r.T
        cand += (gt - cand).mean(axis=0)
        assert _residual(cand, gt) >= res - 1e-9


def test_umeyama_degenerate_sets_are_flagged():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    al = umeyama_align(line, line + 1.0)
    assert bool(al.degenerate) and np.allclose(al.rotation, np.eye(3)) and np.array_equal(al.aligned, line)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_umeyama_optimality_against_random_search(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    best = _residual(umeyama_align(pred, gt).aligned, gt)
    for _ in range(1000 // 100):  # 10 batches of 100 candidates
        rots = np.stack([random_rotation(rng) for _ in range(100)])
        scales = rng.uniform(0.1, 2.0, size=100)
        cand = scales[:, None, None] * np.einsum("kij,mj->kmi", rots, pred)
        cand += (gt.mean(axis=0) - cand.mean(axis=1))[:, None, :]
        assert np.min(np.sum((cand - gt) ** 2, axis=(1, 2))) >= best - 1e-9


def test_umeyama_is_per_frame():
    r = Rng(3)
    gt = r.normal((4, 7, 3))
    pred = np.stack([s * g @ rotation_z(a).T for s, g, a in zip([1, 2, 3, 4], gt, [0.1, 1, 2, 3])])
    assert np.allclose(umeyama_align(pred, gt).aligned, gt, atol=1e-10)


# --- joint rewards ---------------------------------------------------------

def test_identical_motion_scores_one(skel, small_dataset):
    m = small_dataset.records[0].motion
    assert joint_rewards(m, m, skel, ONES) == pytest.approx((1.0, 1.0, 1.0, 1.0), abs=1e-12)


def test_uniform_position_offset(skel, small_dataset):
    gt = small_dataset.records[0].motion
    pred = gt.copy()
    pred.root_pos = pred.root_pos + np.array([0.1, 0.0, 0.0])
    r_rot, r_pos, r_al, r_vel = joint_rewards(pred, gt, skel, ONES)
    assert r_pos == pytest.approx(math.exp(-0.1), abs=1e-12)
    assert r_rot == 1.0 and r_al == pytest.approx(1.0, abs=1e-9) and r_vel == pytest.approx(1.0, abs=1e-12)


def test_rigid_yaw_is_removed_by_alignment(skel, small_dataset):
    gt = small_dataset.records[1].motion
    pred = transform_motion(gt, SE3(quat_from_axis_angle([0, 0, 1], math.radians(30)), np.zeros(3)))
    _, r_pos, r_al, _ = joint_rewards(pred, gt, skel, ONES)
    assert r_al == pytest.approx(1.0, abs=1e-9) and r_pos < 1.0


def test_rotation_error_oracle(skel, small_dataset):
    gt = small_dataset.records[2].motion
    pred = gt.copy()
    pred.local_rot = pred.local_rot.copy()
    pred.local_rot[:, 3] = quat_from_axis_angle([1.0, 0, 0], 0.2) * np.ones((gt.frames, 1))
    from egogrpo.kinematics import quat_to_matrix
    ref = np.mean([np.abs(quat_to_matrix(pred.local_rot[t, j]) - quat_to_matrix(gt.local_rot[t, j])).sum()
                   for t in range(gt.frames) for j in range(gt.joint_count)])
    assert joint_errors(pred, gt, skel).rot == pytest.approx(ref, rel=1e-12)


def test_velocity_error_oracle(skel, small_dataset):
    gt = small_dataset.records[3].motion
    pred = gt.copy()
    pred.root_pos = pred.root_pos + np.outer(np.arange(gt.frames), [0.01, 0.0, 0.0])
    # every frame difference grows by 0.01, including the copied first frame
    assert joint_errors(pred, gt, skel).vel == pytest.approx(0.01, rel=1e-9)


def test_mismatched_shapes_rejected(skel, small_dataset):
    a, b = small_dataset.records[0].motion, small_dataset.records[1].motion
    short = type(a)(a.root_rot[:4], a.root_pos[:4], a.local_rot[:4])
    with pytest.raises(ValueError):
        joint_rewards(short, b, skel, ONES)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.3))
def test_joint_reward_bounds_and_alignment_dominance(skel, small_dataset, seed, noise):
    gt = small_dataset.records[seed % len(small_dataset.records)].motion
    r = np.random.default_rng(seed)
    pred = gt.copy()
    pred.root_pos = pred.root_pos + noise * r.normal(size=pred.root_pos.shape)
    pred.local_rot = pred.local_rot + noise * r.normal(size=pred.local_rot.shape)
    w = RewardWeights(1.0, 1.0, 0.7, 0.7, 1.0)
    rewards = joint_rewards(pred, gt, skel, w)
    assert all(0.0 < x <= 1.0 for x in rewards)
    assert rewards[2] >= rewards[1] - 1e-12


def test_larger_error_gives_smaller_component(skel, small_dataset):
    gt = small_dataset.records[0].motion
    vals = []
    for d in (0.05, 0.1, 0.2):
        p = gt.copy()
        p.root_pos = p.root_pos + d
        vals.append(joint_rewards(p, gt, skel, ONES)[1])
    assert vals[0] > vals[1] > vals[2]


# --- visual and total reward ------------------------------------------------

def test_visual_reward_values():
    assert visual_reward(0.0, ONES) == 1.0
    assert visual_reward(1.0, ONES) == pytest.approx(math.e)
    assert visual_reward(0.5, ONES) == pytest.approx(1.6487212707)


def test_total_reward_examples(skel, small_dataset):
    rec = small_dataset.records[0]
    zero = PerceptualScorer(skel.joint_count)
    br = total_reward(rec.motion, rec.motion, rec.head, skel, zero, ONES)
    assert br.r_total == pytest.approx(math.exp(0.5) + 4, abs=1e-12)
    other = small_dataset.records[1].motion
    br = total_reward(other, rec.motion, rec.head, skel, zero, RewardWeights(0, 0, 0, 0, 0))
    assert np.all(br.components() == 1.0) and br.r_total == 5.0
    br = total_reward(other, rec.motion, rec.head, skel, PerceptualScorer(skel.joint_count, rng=Rng(0)), ONES)
    assert br.r_total == pytest.approx(br.components().sum()) and 1 <= br.r_vis <= math.e


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        RewardWeights(omega_pos=-1.0)
    with pytest.raises(ValueError):
        RewardWeights(omega_vel=float("nan"))


# --- InfoNCE ---------------------------------------------------------------

def test_infonce_reference_values():
    assert infonce_from_scores(np.full(16, 0.3))[0] == pytest.approx(math.log(16))
    assert infonce_from_scores([0.4, 0.4])[0] == pytest.approx(math.log(2))
    assert infonce_from_scores(np.r_[1.0, np.zeros(15)], delta=1 / 45)[0] < 1e-15
    with pytest.raises(ValueError):
        infonce_from_scores([0.5])


def test_infonce_gradient_and_monotonicity():
    s = np.array([0.3, 0.5, 0.1, 0.7])
    _, g = infonce_from_scores(s)
    h = 1e-6
    num = [(infonce_from_scores(s + h * e)[0] - infonce_from_scores(s - h * e)[0]) / (2 * h) for e in np.eye(4)]
    assert np.allclose(g, num, rtol=1e-6)
    losses = [infonce_from_scores(np.r_[p, s[1:]])[0] for p in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_infonce_loss_with_zero_scorer(skel, small_dataset):
    rec = small_dataset.records[0]
    pair = (skeleton_features(skel, rec.motion, rec.head), head_features(rec.head))
    assert infonce_loss(PerceptualScorer(skel.joint_count), pair, [pair] * 15) == pytest.approx(math.log(16))
    with pytest.raises(ValueError):
        infonce_loss(PerceptualScorer(skel.joint_count), pair, [])


# --- hard negatives and training -------------------------------------------

@pytest.fixture(scope="module")
def tiny_policy(skel):
    return Denoiser.create(8, skel.joint_count, hidden=(16,), rng=Rng(0)), build_schedule(20, 1e-3, 0.2)


def test_forced_final_step_negative_equals_policy_output(skel, small_dataset, tiny_policy):
    den, sched = tiny_policy
    rec = small_dataset.records[0]
    cfg = SamplerConfig(5, 0.0, record_logprobs=False)
    neg = make_hard_negatives(den, [rec.head], sched, cfg, Rng(4), skel, step_choice=4)[0]
    from egogrpo.diffusion import condition_vector, sample_trajectory
    tr = sample_trajectory(den, condition_vector(rec.head), cfg, sched, Rng(4).child("init", 0).normal(den.motion_dim),
                           Rng(0))
    final = vector_to_motion(tr.final, rec.head, skel.joint_count)
    assert neg.step_index == 4
    assert np.allclose(neg.features, skeleton_features(skel, final, rec.head), atol=1e-12)


def test_negative_step_is_uniform_over_last_three(skel, small_dataset, tiny_policy):
    den, sched = tiny_policy
    negs = make_hard_negatives(den, [small_dataset.records[0].head] * 300, sched, SamplerConfig(6, 0.7), Rng(5), skel)
    counts = np.bincount([n.step_index for n in negs], minlength=6)
    assert counts[:3].sum() == 0
    chi2 = float(np.sum((counts[3:] - 100.0) ** 2 / 100.0))
    assert math.exp(-chi2 / 2) > 0.01  # survival function of chi-square with 2 dof


def test_train_scorer_zero_steps_and_learning(skel, small_dataset, tiny_policy):
    den, sched = tiny_policy
    sc = PerceptualScorer(skel.joint_count, d=8, blocks=1, hidden=16, rng=Rng(1))
    before = [p.copy() for p in sc.params]
    opt = Adam(sc.params, lr=1e-3)
    cfg = SamplerConfig(5, 0.7, record_logprobs=False)
    recs = small_dataset.split("train")
    assert train_scorer(sc, recs, den, 0, Rng(2), opt, sched, cfg, skel, negatives=3) == []
    assert all(np.array_equal(a, b) for a, b in zip(before, sc.params))
    losses = train_scorer(sc, recs, den, 60, Rng(2), opt, sched, cfg, skel, negatives=3)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
