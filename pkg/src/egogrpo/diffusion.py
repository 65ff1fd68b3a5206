"""Conditional x0-predicting diffusion over flattened motion vectors.

Sampling uses the DDIM-eta family: ``eta = 0`` is deterministic DDIM and
``eta = 1`` is ancestral DDPM. Every transition is an isotropic Gaussian, so
the per-step policy density needed for GRPO is available in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from egogrpo.kinematics import (
    CONDITION_DIM,
    HeadTrajectory,
    MotionSequence,
    canonical_frame,
    from_frame,
    invariant_condition,
    quat_normalize,
    to_frame,
)
from egogrpo.numerics import Adam, Mlp, Rng

LOG_2PI = math.log(2.0 * math.pi)
TIME_EMBED_DIM = 16


class DegeneratePolicyError(ValueError):
    """A zero-variance transition has no density, so it cannot be a GRPO policy."""


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def alpha_bar_at(self, t: int) -> float:
        """``alpha_bar`` for 1-based ``t``, with ``alpha_bar_0 = 1``: the step
        into ``t = 0`` is the deterministic map onto the clean prediction."""
        if not 0 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def ancestral_std(self, t: int, t_prev: int) -> float:
        a_t, a_p = self.alpha_bar_at(t), self.alpha_bar_at(t_prev)
        return math.sqrt(max((1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p), 0.0))

    @property
    def posterior_std(self) -> np.ndarray:
        """Ancestral std of each single-step transition ``t -> t-1``."""
        return np.array([self.ancestral_std(t, t - 1) for t in range(1, self.steps + 1)])


def build_schedule(steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, steps) if steps > 1 else np.array([beta_min])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    if not 1 <= t <= sched.steps:
        raise ValueError(f"timestep {t} outside [1, {sched.steps}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match sample shape {x0.shape}")
    a = sched.alpha_bar[t - 1]
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def timestep_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# motion <-> vector
# ---------------------------------------------------------------------------


def frame_width(joints: int) -> int:
    return joints * 4 + 7


def motion_to_vector(motion: MotionSequence, head: HeadTrajectory) -> np.ndarray:
    """Flatten a motion expressed in the canonical frame of its head track.

    Per frame: ``N`` local quaternions, then root quaternion and translation.
    """
    rot, pos = to_frame(canonical_frame(head), motion.root_rot, motion.root_pos)
    per_frame = np.concatenate(
        [motion.local_rot.reshape(motion.frames, -1), quat_normalize(rot), pos], axis=-1
    )
    return per_frame.reshape(-1)


def vector_to_motion(vec, head: HeadTrajectory, joints: int, fps: float = 30.0) -> MotionSequence:
    vec = np.asarray(vec, dtype=np.float64)
    frames = vec.size // frame_width(joints)
    if frames * frame_width(joints) != vec.size:
        raise ValueError(f"vector of size {vec.size} does not hold whole frames of {joints} joints")
    per_frame = vec.reshape(frames, frame_width(joints))
    local = quat_normalize(per_frame[:, : joints * 4].reshape(frames, joints, 4))
    rot = quat_normalize(per_frame[:, joints * 4: joints * 4 + 4])
    rot, pos = from_frame(canonical_frame(head), rot, per_frame[:, joints * 4 + 4:])
    return MotionSequence(quat_normalize(rot), pos, local, fps)


def condition_vector(head: HeadTrajectory) -> np.ndarray:
    return invariant_condition(head).reshape(-1)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


class Denoiser:
    """MLP on ``[x_t | time embedding | condition]`` that predicts ``x0``."""

    def __init__(self, net: Mlp, motion_dim: int, cond_dim: int, time_dim: int = TIME_EMBED_DIM):
        if net.layer_dims[0] != motion_dim + time_dim + cond_dim or net.layer_dims[-1] != motion_dim:
            raise ValueError(f"net dims {net.layer_dims} do not fit motion {motion_dim} / cond {cond_dim}")
        self.net = net
        self.motion_dim = motion_dim
        self.cond_dim = cond_dim
        self.time_dim = time_dim

    @classmethod
    def create(cls, frames: int, joints: int, hidden=(256, 256), rng: Rng | None = None) -> "Denoiser":
        motion_dim = frames * frame_width(joints)
        cond_dim = frames * CONDITION_DIM
        dims = [motion_dim + TIME_EMBED_DIM + cond_dim, *hidden, motion_dim]
        net = Mlp.initialized(dims, rng, output_scale=0.1) if rng is not None else Mlp(dims)
        return cls(net, motion_dim, cond_dim)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def copy(self) -> "Denoiser":
        return Denoiser(self.net.copy(), self.motion_dim, self.cond_dim, self.time_dim)

    def _inputs(self, x_t, t, cond):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        cond = np.asarray(cond, dtype=np.float64)
        cond = np.broadcast_to(cond.reshape(-1, self.cond_dim), (b, self.cond_dim))
        return np.concatenate([x_t, timestep_embedding(t, self.time_dim), cond], axis=-1)

    def predict(self, x_t, t, cond, return_cache: bool = False):
        return self.net.forward(self._inputs(x_t, t, cond), return_cache=return_cache)

    def backward(self, cache, grad_x0):
        grads, _ = self.net.backward(cache, grad_x0)
        return grads


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    steps: int = 16
    eta: float = 0.7
    record_logprobs: bool = True
    # test hook: lets eta = 0 run with recording (densities reported as 0)
    allow_degenerate: bool = False

    def validate(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.steps <= sched.steps:
            raise ValueError(f"sampling steps {self.steps} must lie in [1, {sched.steps}]")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.record_logprobs and self.eta == 0.0 and not self.allow_degenerate:
            raise DegeneratePolicyError("degenerate policy density: eta = 0 gives zero-variance transitions")


def sampling_timesteps(sched: NoiseSchedule, n: int) -> list[tuple[int, int]]:
    """Strided ``(t, t_prev)`` pairs from ``T_diff`` down to 0 in ``n`` steps."""
    ts = [int(math.floor(k * sched.steps / n + 0.5)) for k in range(n + 1)]
    ts = sorted(set(ts))
    if len(ts) != n + 1:
        raise ValueError(f"cannot stride {sched.steps} steps into {n} distinct steps")
    return [(ts[k], ts[k - 1]) for k in range(n, 0, -1)]


@dataclass
class Transition:
    """Affine map ``mean = k_x0 * x0_hat + k_xt * x_t`` plus noise ``std``."""

    t: int
    t_prev: int
    k_x0: float
    k_xt: float
    std: float


def transition(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> Transition:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    a_t, a_p = sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev)
    std = eta * sched.ancestral_std(t, t_prev)
    c_eps = math.sqrt(max(1.0 - a_p - std * std, 0.0))
    k_xt = c_eps / math.sqrt(1.0 - a_t)
    k_x0 = math.sqrt(a_p) - c_eps * math.sqrt(a_t) / math.sqrt(1.0 - a_t)
    return Transition(t, t_prev, k_x0, k_xt, std)


def gaussian_log_prob(x, mean, std: float) -> np.ndarray:
    """Sum over the last axis of isotropic Gaussian log densities."""
    if std == 0.0:
        return np.zeros(np.shape(x)[:-1])
    d = np.shape(x)[-1]
    r = (np.asarray(x) - mean) / std
    return -0.5 * np.sum(r * r, axis=-1) - d * (math.log(std) + 0.5 * LOG_2PI)


def sample_step(denoiser: Denoiser, x_t, t: int, t_prev: int, cond, cfg: SamplerConfig,
                rng: Rng | None, sched: NoiseSchedule):
    """One transition for a single sample; returns ``(x_prev, mean, std, log_prob)``."""
    cfg.validate(sched)
    tr = transition(sched, t, t_prev, cfg.eta)
    x0_hat = denoiser.predict(x_t, t, cond)[0]
    mean = tr.k_x0 * x0_hat + tr.k_xt * np.asarray(x_t, dtype=np.float64)
    if tr.std > 0.0:
        x_prev = mean + tr.std * rng.normal(mean.shape)
    else:
        x_prev = mean.copy()
    return x_prev, mean, tr.std, float(gaussian_log_prob(x_prev, mean, tr.std))


@dataclass
class DenoiseTrajectory:
    timesteps: np.ndarray   # (n, 2) rows of (t, t_prev)
    states: np.ndarray      # (n, D) x_t fed to each step
    actions: np.ndarray     # (n, D) sampled x_{t_prev}
    means: np.ndarray       # (n, D)
    stds: np.ndarray        # (n,)
    log_probs: np.ndarray   # (n,)
    x0_preds: np.ndarray    # (n, D) denoiser prediction at each step
    eta: float = 0.7

    @property
    def final(self) -> np.ndarray:
        """Clean sample: the denoiser's ``x0`` prediction at the last step,
        which is also the last action since that step is noise-free."""
        return self.x0_preds[-1]

    @property
    def init_noise(self) -> np.ndarray:
        return self.states[0]

    @property
    def steps(self) -> int:
        return len(self.stds)


def sample_group(denoiser: Denoiser, cond, cfg: SamplerConfig, sched: NoiseSchedule,
                 init_noise, rngs: list[Rng]) -> list[DenoiseTrajectory]:
    """Roll out ``len(rngs)`` trajectories.

    ``init_noise`` of shape ``(D,)`` is shared by every member; ``(G, D)``
    gives each member its own start. ``cond`` is likewise one condition
    vector or one per member. Each member draws its transition noise from its
    own generator, so results do not depend on group size or member order.
    """
    cfg.validate(sched)
    g = len(rngs)
    plan = [transition(sched, t, tp, cfg.eta) for t, tp in sampling_timesteps(sched, cfg.steps)]
    n, d = len(plan), denoiser.motion_dim
    x = np.broadcast_to(np.asarray(init_noise, dtype=np.float64).reshape(-1, d), (g, d)).copy()
    states = np.empty((g, n, d))
    actions = np.empty((g, n, d))
    means = np.empty((g, n, d))
    preds = np.empty((g, n, d))
    logp = np.zeros((g, n))
    for k, tr in enumerate(plan):
        states[:, k] = x
        x0_hat = denoiser.predict(x, tr.t, cond)
        mean = tr.k_x0 * x0_hat + tr.k_xt * x
        if tr.std > 0.0:
            noise = np.stack([r.normal(d) for r in rngs])
            x = mean + tr.std * noise
        else:
            x = mean.copy()
        actions[:, k] = x
        means[:, k] = mean
        preds[:, k] = x0_hat
        if cfg.record_logprobs:
            logp[:, k] = gaussian_log_prob(x, mean, tr.std)
    ts = np.array([(tr.t, tr.t_prev) for tr in plan], dtype=np.int64)
    stds = np.array([tr.std for tr in plan])
    return [DenoiseTrajectory(ts, states[i], actions[i], means[i], stds.copy(), logp[i], preds[i], cfg.eta)
            for i in range(g)]


def sample_trajectory(denoiser: Denoiser, cond, cfg: SamplerConfig, sched: NoiseSchedule,
                      init_noise, rng: Rng) -> DenoiseTrajectory:
    return sample_group(denoiser, cond, cfg, sched, init_noise, [rng])[0]


def replay_log_prob(denoiser: Denoiser, traj: DenoiseTrajectory, cond, cfg: SamplerConfig,
                    sched: NoiseSchedule, return_cache: bool = False):
    """Densities of the recorded actions under the denoiser's current weights."""
    plan = [transition(sched, int(t), int(tp), traj.eta) for t, tp in traj.timesteps]
    if len(plan) != cfg.steps or traj.eta != cfg.eta:
        raise ValueError("trajectory was recorded with a different sampler configuration")
    t_col = traj.timesteps[:, 0]
    x0_hat, cache = denoiser.predict(traj.states, t_col, cond, return_cache=True)
    k_x0 = np.array([tr.k_x0 for tr in plan])[:, None]
    k_xt = np.array([tr.k_xt for tr in plan])[:, None]
    mean = k_x0 * x0_hat + k_xt * traj.states
    lp = np.array([gaussian_log_prob(traj.actions[k], mean[k], plan[k].std) for k in range(len(plan))])
    if return_cache:
        return lp, (cache, mean, k_x0, np.array([tr.std for tr in plan]))
    return lp


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


def denoising_loss(denoiser: Denoiser, x0, cond, t, eps, sched: NoiseSchedule):
    """Mean over the batch of ``||mu(x_t, t, c) - x0||^2``; returns loss and grads."""
    x0 = np.atleast_2d(x0)
    a = sched.alpha_bar[np.asarray(t) - 1][:, None]
    x_t = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
    pred, cache = denoiser.predict(x_t, t, cond, return_cache=True)
    diff = pred - x0
    b = x0.shape[0]
    loss = float(np.sum(diff * diff) / b)
    return loss, denoiser.backward(cache, 2.0 * diff / b)


def pretrain_step(denoiser: Denoiser, x0, cond, sched: NoiseSchedule, rng: Rng, opt: Adam) -> float:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, sched.steps + 1, size=x0.shape[0])
    eps = rng.normal(x0.shape)
    loss, grads = denoising_loss(denoiser, x0, cond, t, eps, sched)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite denoising loss {loss}")
    opt.step(grads)
    return loss


def encode_records(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack motion vectors and condition vectors for dataset records."""
    x = np.stack([motion_to_vector(r.motion, r.head) for r in records])
    c = np.stack([condition_vector(r.head) for r in records])
    return x, c


def pretrain(denoiser: Denoiser, records, sched: NoiseSchedule, steps: int, batch_size: int,
             rng: Rng, opt: Adam) -> list[float]:
    """Minibatch pre-training; minibatch ``i`` is drawn from ``rng.child(i)``."""
    x, c = encode_records(records)
    losses = []
    start = opt.step_count
    for i in range(steps):
        r = rng.child("step", start + i)
        idx = r.integers(0, len(x), size=min(batch_size, len(x)))
        losses.append(pretrain_step(denoiser, x[idx], c[idx], sched, r, opt))
    return losses


def reconstruct(denoiser: Denoiser, heads: list[HeadTrajectory], sched: NoiseSchedule, steps: int,
                eta: float, rng: Rng, joints: int, fps: float = 30.0) -> list[MotionSequence]:
    """Decode one motion per head track; head ``i`` uses ``rng.child("sample", i)``."""
    if not heads:
        return []
    cfg = SamplerConfig(steps, eta, record_logprobs=False)
    conds = np.stack([condition_vector(h) for h in heads])
    inits = np.stack([rng.child("sample", i).child("init").normal(denoiser.motion_dim) for i in range(len(heads))])
    members = [rng.child("sample", i).child("noise") for i in range(len(heads))]
    trajs = sample_group(denoiser, conds, cfg, sched, inits, members)
    return [vector_to_motion(tr.final, h, joints, fps) for tr, h in zip(trajs, heads)]
