"""Group-relative policy optimisation over the denoising chain.

A rollout samples ``G`` denoising trajectories from one shared starting
noise, scores the decoded motions with the hybrid reward, and normalises each
reward component within the group. The update maximises the clipped
importance-weighted advantage over every recorded sampling step.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from egogrpo import kernels
from egogrpo.diffusion import (
    DenoiseTrajectory,
    Denoiser,
    NoiseSchedule,
    SamplerConfig,
    condition_vector,
    gaussian_log_prob,
    sample_group,
    transition,
    vector_to_motion,
)
from egogrpo.kinematics import HeadTrajectory, MotionSequence, Skeleton
from egogrpo.numerics import Adam, Rng, global_norm
from egogrpo.rewards import RewardBreakdown, RewardWeights, group_rewards
from egogrpo.scorer import PerceptualScorer

LOG_COLUMNS = ("iteration", "mean_total_reward", "mean_visual_reward", "mean_joint_reward",
               "diversity", "grad_norm", "clipped_fraction")


@dataclass
class GrpoConfig:
    group_size: int = 16
    clip_epsilon: float | None = 0.2
    std_guard: float = 1e-4
    advantage_aggregation: str = "sum"
    perlin_lambda: float = 0.1
    perlin_frequency: float = 0.1
    # "group": one perturbation shared by all members; "member": one each
    perlin_scope: str = "member"
    learning_rate: float = 1e-4
    iterations: int = 100
    inner_epochs: int = 1
    batch_size: int = 2
    workers: int = 1

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError(f"group size must be >= 2, got {self.group_size}")
        if self.perlin_lambda < 0 or not math.isfinite(self.perlin_lambda):
            raise ValueError(f"perlin lambda must be finite and >= 0, got {self.perlin_lambda}")
        if self.perlin_frequency <= 0:
            raise ValueError("perlin frequency must be positive")
        if self.advantage_aggregation not in ("sum", "mean"):
            raise ValueError(f"unknown advantage aggregation {self.advantage_aggregation!r}")
        if self.perlin_scope not in ("group", "member"):
            raise ValueError(f"unknown perlin scope {self.perlin_scope!r}")
        if self.clip_epsilon is not None and not 0 < self.clip_epsilon < 1:
            raise ValueError(f"clip epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if self.iterations < 0 or self.inner_epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("iterations >= 0, inner_epochs >= 1, batch_size >= 1 and workers >= 1 required")
        if self.std_guard < 0:
            raise ValueError("std guard must be >= 0")


# ---------------------------------------------------------------------------
# Perlin perturbation
# ---------------------------------------------------------------------------


@dataclass
class PerlinNoise1D:
    """Gradient noise with one gradient per lattice point and axis."""

    gradients: np.ndarray  # (L, A) in [-1, 1]
    frequency: float = 0.1
    seed: int | None = None

    @classmethod
    def random(cls, rng: Rng, frames: int, frequency: float = 0.1, axes: int = 3) -> "PerlinNoise1D":
        cells = int(math.ceil(max(frames - 1, 0) * frequency)) + 2
        return cls(rng.uniform(-1.0, 1.0, (cells, axes)), frequency, rng.seed)

    def __call__(self, t):
        return perlin_sample(self, t)


def perlin_sample(noise: PerlinNoise1D, t) -> np.ndarray:
    """Noise value(s) at lattice coordinate ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t >= len(noise.gradients) - 1):
        raise ValueError(f"coordinate outside the lattice [0, {len(noise.gradients) - 1})")
    return kernels.perlin_1d(noise.gradients, t)


def perturb_condition(h: HeadTrajectory, lam: float, noise: PerlinNoise1D) -> HeadTrajectory:
    """Add ``lam * P(t * freq)`` to the head translation of frame ``t``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0.0:
        return h
    p = perlin_sample(noise, np.arange(h.frames) * noise.frequency)
    return HeadTrajectory(h.rot.copy(), h.pos + lam * p)


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


@dataclass
class Advantages:
    per_component: np.ndarray  # (G, K)
    aggregated: np.ndarray     # (G,)
    guarded: np.ndarray        # (K,) True where the std guard zeroed the component


def compute_advantages(rewards, cfg: GrpoConfig) -> Advantages:
    """Group-normalise ``(G, K)`` reward components with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] < 2:
        raise ValueError("advantages need a group of at least two samples")
    mean = r.mean(axis=0)
    std = r.std(axis=0)
    guarded = ~(std >= cfg.std_guard)
    safe = np.where(guarded, 1.0, std)
    adv = np.where(guarded, 0.0, (r - mean) / safe)
    agg = adv.sum(axis=1) if cfg.advantage_aggregation == "sum" else adv.mean(axis=1)
    return Advantages(adv, agg, guarded)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class GroupRollout:
    conditions: np.ndarray            # (G, C) post-perturbation conditioning per member
    init_noise: np.ndarray            # (D,)
    trajectories: list[DenoiseTrajectory]
    rewards: list[RewardBreakdown]
    advantages: Advantages
    motions: list[MotionSequence] = field(default_factory=list)

    @property
    def condition(self) -> np.ndarray:
        return self.conditions[0]

    @property
    def reward_matrix(self) -> np.ndarray:
        return np.stack([r.components() for r in self.rewards])

    @property
    def diversity(self) -> float:
        return kernels.mean_pairwise_distance(np.stack([tr.final for tr in self.trajectories]))


def perturbed_conditions(head: HeadTrajectory, cfg: GrpoConfig, rng: Rng) -> np.ndarray:
    """``(G, C)`` conditioning vectors, perturbed per group or per member."""
    g = cfg.group_size
    if cfg.perlin_lambda == 0.0:
        return np.broadcast_to(condition_vector(head), (g, condition_vector(head).size)).copy()

    def one(r):
        noise = PerlinNoise1D.random(r, head.frames, cfg.perlin_frequency)
        return condition_vector(perturb_condition(head, cfg.perlin_lambda, noise))

    if cfg.perlin_scope == "group":
        c = one(rng.child("perlin"))
        return np.broadcast_to(c, (g, c.size)).copy()
    return np.stack([one(rng.child("perlin", i)) for i in range(g)])


def rollout_group(denoiser: Denoiser, head: HeadTrajectory, scorer: PerceptualScorer, gt: MotionSequence,
                  skel: Skeleton, cfg: GrpoConfig, sampler: SamplerConfig, sched: NoiseSchedule,
                  w: RewardWeights, rng: Rng) -> GroupRollout:
    """Sample a group for one head track and score it against the clean target."""
    cfg.validate()
    conds = perturbed_conditions(head, cfg, rng)
    init = rng.child("init").normal(denoiser.motion_dim)
    members = [rng.child("member", i) for i in range(cfg.group_size)]
    trajs = sample_group(denoiser, conds, sampler, sched, init, members)
    motions = [vector_to_motion(tr.final, head, skel.joint_count, gt.fps) for tr in trajs]
    rewards = group_rewards(motions, gt, head, skel, scorer, w)
    adv = compute_advantages(np.stack([r.components() for r in rewards]), cfg)
    return GroupRollout(conds, init, trajs, rewards, adv, motions)


# ---------------------------------------------------------------------------
# policy update
# ---------------------------------------------------------------------------


def clipped_surrogate(ratio, adv, eps: float | None):
    """Per-element ``min(r*A, clip(r)*A)`` and its derivative with respect to
    the log-ratio (zero where the clipped branch is active)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    plain = ratio * adv
    if eps is None:
        return plain, plain.copy(), np.zeros(plain.shape, dtype=bool)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    value = np.minimum(plain, clipped)
    active = clipped < plain
    return value, np.where(active, 0.0, plain), active


@dataclass
class UpdateStats:
    objective: float
    grad_norm: float
    clipped_fraction: float
    skipped: int


def policy_gradient(denoiser: Denoiser, rollouts: list[GroupRollout], sampler: SamplerConfig,
                    sched: NoiseSchedule, cfg: GrpoConfig):
    """Objective and its gradient (ascent direction) at the current weights."""
    states, actions, t_col, conds, olds, advs, plans = [], [], [], [], [], [], []
    for ro in rollouts:
        for i, tr in enumerate(ro.trajectories):
            if tr.steps != sampler.steps or tr.eta != sampler.eta:
                raise ValueError("trajectory was recorded with a different sampler configuration")
            states.append(tr.states)
            actions.append(tr.actions)
            t_col.append(tr.timesteps[:, 0])
            conds.append(np.broadcast_to(ro.conditions[i], (tr.steps, ro.conditions.shape[1])))
            olds.append(tr.log_probs)
            advs.append(np.full(tr.steps, ro.advantages.aggregated[i]))
            plans.append(tr.timesteps)
    states = np.concatenate(states)
    actions = np.concatenate(actions)
    t_col = np.concatenate(t_col)
    conds = np.concatenate(conds)
    old = np.concatenate(olds)
    adv = np.concatenate(advs)
    ts = np.concatenate(plans)
    cache_tr = {}
    k_x0 = np.empty(len(ts))
    k_xt = np.empty(len(ts))
    std = np.empty(len(ts))
    for j, (t, tp) in enumerate(ts):
        key = (int(t), int(tp))
        if key not in cache_tr:
            cache_tr[key] = transition(sched, key[0], key[1], sampler.eta)
        tr = cache_tr[key]
        k_x0[j], k_xt[j], std[j] = tr.k_x0, tr.k_xt, tr.std

    x0_hat, cache = denoiser.predict(states, t_col, conds, return_cache=True)
    mean = k_x0[:, None] * x0_hat + k_xt[:, None] * states
    live = std > 0.0
    safe_std = np.where(live, std, 1.0)
    d = states.shape[1]
    resid = actions - mean
    new = np.where(live, -0.5 * np.sum((resid / safe_std[:, None]) ** 2, axis=1)
                   - d * (np.log(safe_std) + 0.5 * math.log(2 * math.pi)), 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.where(live, np.exp(new - old), 1.0)
    finite = np.isfinite(ratio)
    skipped = int(np.count_nonzero(~finite))
    ratio = np.where(finite, ratio, 1.0)
    value, coef, active = clipped_surrogate(ratio, adv, cfg.clip_epsilon)
    m = len(ratio)
    coef = np.where(finite & live, coef, 0.0) / m
    objective = float(np.sum(np.where(finite, value, 0.0)) / m)
    # d log pi / d mean = (a - mean) / std^2 ;  d mean / d x0_hat = k_x0
    g_x0 = (coef * k_x0 / safe_std ** 2)[:, None] * resid
    grads = denoiser.backward(cache, g_x0)
    return objective, grads, float(np.mean(active)), skipped


def grpo_update(denoiser: Denoiser, rollouts: list[GroupRollout], cfg: GrpoConfig, opt: Adam | None,
                sampler: SamplerConfig, sched: NoiseSchedule) -> UpdateStats:
    """One ascent step on the clipped objective; ``opt=None`` only evaluates."""
    objective, grads, clipped, skipped = policy_gradient(denoiser, rollouts, sampler, sched, cfg)
    norm = global_norm(grads)
    if opt is not None:
        opt.step([-g for g in grads])
    return UpdateStats(objective, norm, clipped, skipped)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class IterationLog:
    iteration: int
    mean_total_reward: float
    mean_visual_reward: float
    mean_joint_reward: float
    diversity: float
    grad_norm: float
    clipped_fraction: float
    guard_rate: float = 0.0
    skipped: int = 0

    def row(self):
        return [self.iteration, self.mean_total_reward, self.mean_visual_reward, self.mean_joint_reward,
                self.diversity, self.grad_norm, self.clipped_fraction]


def history_csv(history: list[IterationLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for h in history:
        w.writerow([h.iteration] + [repr(float(v)) for v in h.row()[1:]])
    return buf.getvalue()


def train_grpo(denoiser: Denoiser, scorer: PerceptualScorer, records, cfg: GrpoConfig,
               sampler: SamplerConfig, sched: NoiseSchedule, w: RewardWeights, skel: Skeleton,
               rng: Rng, opt: Adam | None = None, on_iteration=None) -> list[IterationLog]:
    """Run ``cfg.iterations`` iterations, updating ``denoiser`` in place.

    Rollouts of one batch are independent and may run on ``cfg.workers``
    threads; every member draws from a generator keyed by
    ``(iteration, batch slot, member)`` so results do not depend on threading.
    """
    cfg.validate()
    sampler.validate(sched)
    if not records:
        raise ValueError("no training records")
    if opt is None:
        opt = Adam(denoiser.params, lr=cfg.learning_rate)
    history = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.iterations):
            r_it = rng.child("iteration", it)
            picks = r_it.child("batch").integers(0, len(records), cfg.batch_size)
            jobs = [(records[int(p)], r_it.child("group", b)) for b, p in enumerate(picks)]

            def run(job):
                rec, r = job
                return rollout_group(denoiser, rec.head, scorer, rec.motion, skel, cfg, sampler, sched, w, r)

            rollouts = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
            stats = [grpo_update(denoiser, rollouts, cfg, opt, sampler, sched) for _ in range(cfg.inner_epochs)]
            rewards = np.concatenate([ro.reward_matrix for ro in rollouts])
            log = IterationLog(
                iteration=it,
                mean_total_reward=float(rewards.sum(axis=1).mean()),
                mean_visual_reward=float(rewards[:, 0].mean()),
                mean_joint_reward=float(rewards[:, 1:].sum(axis=1).mean()),
                diversity=float(np.mean([ro.diversity for ro in rollouts])),
                grad_norm=float(np.mean([s.grad_norm for s in stats])),
                clipped_fraction=float(np.mean([s.clipped_fraction for s in stats])),
                guard_rate=float(np.mean([ro.advantages.guarded.mean() for ro in rollouts])),
                skipped=sum(s.skipped for s in stats),
            )
            history.append(log)
            if on_iteration is not None:
                on_iteration(log)
    finally:
        if pool is not None:
            pool.shutdown()
    return history
