"""Experiment configuration: nested dataclasses, JSON round-trip and dotted
``KEY=VALUE`` overrides."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from egogrpo.grpo import GrpoConfig
from egogrpo.rewards import RewardWeights


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    count: int = 256
    frames: int = 32
    fps: float = 30.0
    split_fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class ScheduleConfig:
    steps: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.2


@dataclass
class DenoiserConfig:
    hidden: list[int] = field(default_factory=lambda: [256, 256])


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3


@dataclass
class ScorerConfig:
    width: int = 32
    blocks: int = 2
    hidden: int = 64
    steps: int = 300
    learning_rate: float = 1e-4
    negatives: int = 15
    temperature: float = 0.07


@dataclass
class SamplingConfig:
    steps: int = 16
    eta: float = 0.7


@dataclass
class EvalConfig:
    split: str = "test"
    eta: float = 0.0
    contact_threshold: float = 0.02
    rotation_mode: str = "l1"


@dataclass
class StudyConfig:
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1])
    groups: int = 20


@dataclass
class ExperimentConfig:
    seed: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    sampler: SamplingConfig = field(default_factory=SamplingConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    grpo: GrpoConfig = field(default_factory=lambda: GrpoConfig(learning_rate=1e-6))
    eval: EvalConfig = field(default_factory=EvalConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    def validate(self) -> "ExperimentConfig":
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        d = self.data
        if d.count < 1 or d.frames < 4 or d.fps <= 0:
            raise ConfigError("data.count >= 1, data.frames >= 4 and data.fps > 0 required")
        if len(d.split_fractions) != 3 or any(f < 0 for f in d.split_fractions):
            raise ConfigError("data.split_fractions must be three non-negative numbers")
        if not math.isclose(sum(d.split_fractions), 1.0, abs_tol=1e-9):
            raise ConfigError(f"data.split_fractions must sum to 1, got {sum(d.split_fractions)}")
        s = self.schedule
        if not (s.steps >= 1 and 0 < s.beta_min <= s.beta_max < 1):
            raise ConfigError("schedule needs steps >= 1 and 0 < beta_min <= beta_max < 1")
        if not 1 <= self.sampler.steps <= s.steps or not 0 < self.sampler.eta <= 1:
            raise ConfigError("sampler needs 1 <= steps <= schedule.steps and 0 < eta <= 1")
        if self.pretrain.steps < 0 or self.pretrain.batch_size < 1 or self.pretrain.learning_rate <= 0:
            raise ConfigError("pretrain needs steps >= 0, batch_size >= 1, learning_rate > 0")
        sc = self.scorer
        if sc.steps < 0 or sc.negatives < 1 or sc.temperature <= 0 or sc.learning_rate <= 0:
            raise ConfigError("scorer needs steps >= 0, negatives >= 1, temperature > 0, learning_rate > 0")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train/val/test, got {self.eval.split!r}")
        if self.eval.rotation_mode not in ("l1", "geodesic"):
            raise ConfigError(f"eval.rotation_mode must be l1 or geodesic, got {self.eval.rotation_mode!r}")
        if not 0 <= self.eval.eta <= 1:
            raise ConfigError("eval.eta must lie in [0, 1]")
        if self.study.groups < 1 or any(lam < 0 for lam in self.study.lambdas) or not self.study.lambdas:
            raise ConfigError("study needs groups >= 1 and a non-empty list of lambdas >= 0")
        try:
            self.grpo.validate()
            RewardWeights(**asdict(self.rewards))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self, sections=None) -> str:
        d = self.to_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


ALIASES = {"grpo.lambda": "grpo.perlin_lambda", "grpo.G": "grpo.group_size"}


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    default = cls()
    for name, value in data.items():
        sub = getattr(default, name)
        if is_dataclass(sub):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{name} must be an object")
            kwargs[name] = _build(type(sub), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``KEY=VALUE`` strings; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        old = node[parts[-1]]
        value = _parse_value(raw)
        if isinstance(old, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        node[parts[-1]] = value
    return from_dict(d)
