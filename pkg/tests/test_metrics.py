import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egogrpo.kinematics import MotionSequence, Skeleton, forward_kinematics
from egogrpo.metrics import (
    REPORT_COLUMNS, diversity, dynamics_metrics, evaluate, jitter, plausibility_metrics, position_errors,
    position_metrics, report_dict, scorer_accuracy,
)
from egogrpo.numerics import Rng
from egogrpo.rewards import RewardWeights, joint_rewards
from egogrpo.scorer import PerceptualScorer
from oracles import random_rotation

IDENT = np.array([1.0, 0, 0, 0])


def _still(frames, root_pos, joints=4):
    return MotionSequence(np.tile(IDENT, (frames, 1)), root_pos, np.tile(IDENT, (frames, joints, 1)))


@pytest.fixture(scope="module")
def stick():
    # root, head above it, one foot 1 m below, a second foot 0.5 m below
    return Skeleton([-1, 0, 0, 0], [[0, 0, 0], [0, 0, 0.3], [0, 0, -1.0], [0.2, 0, -0.5]],
                    head_index=1, foot_indices=(2, 3))


def test_position_metric_examples(skel, small_dataset):
    gt = small_dataset.records[0].motion
    assert position_metrics(gt, gt, skel) == pytest.approx((0.0, 0.0), abs=1e-9)
    shifted = gt.copy()
    shifted.root_pos = shifted.root_pos + np.array([0.1, 0.0, 0.0])
    mpjpe, pa = position_metrics(shifted, gt, skel)
    assert mpjpe == pytest.approx(100.0, abs=1e-9) and pa < 1e-6
    g, _ = forward_kinematics(skel, gt)
    centre = g.mean(axis=1, keepdims=True)
    mpjpe, pa = position_errors(centre + 1.1 * (g - centre), g)
    assert mpjpe > 0 and pa < 1e-6


def test_dynamics_metric_examples(skel, small_dataset):
    gt = small_dataset.records[0].motion
    mpjve, mpjre, _ = dynamics_metrics(gt, gt, skel, 30.0)
    assert mpjve == 0.0 and mpjre == 0.0
    assert dynamics_metrics(gt, gt, skel, 30.0, rotation_mode="geodesic")[1] == pytest.approx(0.0, abs=1e-6)
    line = np.outer(np.arange(10.0), [0.3, -0.1, 0.2])[:, None, :]
    assert jitter(line, 30.0) == pytest.approx(0.0, abs=1e-9)
    cubic = np.zeros((8, 1, 3))
    cubic[:, 0, 0] = np.arange(8.0) ** 3
    assert jitter(cubic, 1.0) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        dynamics_metrics(_still(3, np.zeros((3, 3)), 8), _still(3, np.zeros((3, 3)), 8), skel)
    with pytest.raises(ValueError):
        dynamics_metrics(gt, gt, skel, rotation_mode="euler")


def test_velocity_error_oracle(skel, small_dataset):
    gt = small_dataset.records[1].motion
    pred = gt.copy()
    pred.root_pos = pred.root_pos + np.outer(np.arange(gt.frames), [0.0, 0.002, 0.0])
    assert dynamics_metrics(pred, gt, skel, 30.0)[0] == pytest.approx(1000.0 * 30 * 0.002)


def test_plausibility_examples(stick):
    frames = 5
    pos = np.tile([0.0, 0.0, 1.5], (frames, 1))
    assert plausibility_metrics(_still(frames, pos), stick) == (0.0, 0.0)
    sunk = pos.copy()
    sunk[2, 2] = 0.95  # first foot reaches z = -0.05 on one frame
    assert plausibility_metrics(_still(frames, sunk), stick)[0] == pytest.approx(0.05)
    slide = np.column_stack([0.02 * np.arange(frames), np.zeros(frames), np.full(frames, 1.01)])
    gp, fs = plausibility_metrics(_still(frames, slide), stick)
    assert gp == 0.0 and fs == pytest.approx(0.10)
    with pytest.raises(ValueError):
        plausibility_metrics(_still(frames, pos), stick, contact_threshold=0.0)


def test_diversity_examples():
    a = np.zeros(6)
    b = np.array([3.0, 4.0, 0, 0, 0, 0])
    assert diversity([a, a, a]) == 0.0
    assert diversity([a, b]) == pytest.approx(5.0)
    g = Rng(0).normal((5, 7))
    assert diversity(2.5 * g) == pytest.approx(2.5 * diversity(g))
    assert diversity(g + Rng(1).normal(7)) == pytest.approx(diversity(g))
    with pytest.raises(ValueError):
        diversity([a])


def test_scorer_accuracy_examples(skel):
    r = Rng(0)
    pool = [(r.normal((4, skel.joint_count, 7)), r.normal((4, skel.joint_count, 7)), r.normal((4, 9)))
            for _ in range(100)]
    oracle = lambda body, head: np.array([1.0, 0.0])
    assert scorer_accuracy(oracle, pool) == (1.0, 0)
    assert scorer_accuracy(PerceptualScorer(skel.joint_count), pool[:10]) == (0.0, 10)
    inverted = {pool[i][0].tobytes() for i in range(0, 70, 10)}

    def injected(body, head):
        return np.array([0.0, 1.0]) if body[0].tobytes() in inverted else np.array([1.0, 0.0])

    acc, wrong = scorer_accuracy(injected, pool)
    assert acc == pytest.approx(0.93) and wrong == 7
    with pytest.raises(ValueError):
        scorer_accuracy(oracle, [])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pa_never_exceeds_mpjpe(seed):
    r = np.random.default_rng(seed)
    g = r.normal(size=(3, 8, 3))
    p = g + r.uniform(0, 1) * r.normal(size=g.shape)
    mpjpe, pa = position_errors(p, g)
    assert pa <= mpjpe + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pa_removes_any_similarity(seed):
    r = np.random.default_rng(seed)
    g = r.normal(size=(4, 8, 3))
    rot = random_rotation(r)
    p = r.uniform(0.2, 5.0) * g @ rot.T + r.normal(size=3) * 10
    assert position_errors(p, g)[1] < 1e-6


def test_reward_and_metric_agree(skel, small_dataset):
    gt = small_dataset.records[0].motion
    pred = small_dataset.records[1].motion
    mpjpe, _ = position_metrics(pred, gt, skel)
    r_pos = joint_rewards(pred, gt, skel, RewardWeights(omega_pos=1.3))[1]
    assert r_pos == pytest.approx(math.exp(-1.3 * mpjpe / 1000.0), rel=1e-12)


def test_evaluate_report(skel, small_dataset):
    recs = small_dataset.records[:3]
    gts = [r.motion for r in recs]
    oracle = evaluate(gts, gts, skel, 30.0)
    assert oracle.mpjpe == 0.0 and oracle.mpjve == 0.0 and oracle.mpjre == 0.0 and oracle.pa_mpjpe < 1e-9
    rep = evaluate(gts[::-1], gts, skel, 30.0)
    assert all(v >= 0 and math.isfinite(v) for v in rep.row())
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 2
    assert len(rep.per_sequence_csv().splitlines()) == 4
    assert set(report_dict(rep)) == {"mpjpe", "pa_mpjpe", "mpjve", "mpjre", "jitter", "gp", "fs"}
    with pytest.raises(ValueError):
        evaluate([], [], skel)
