"""Run configuration: TOML file with one section per subsystem.

Sections [env], [reward], [surrogate], [curriculum], and [train] map
onto the corresponding config dataclasses; every field has a default,
so an empty file (or no file) is a valid full configuration.  Unknown
keys are rejected rather than ignored, typos should not silently
train a different experiment.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np

from .errors import DataError
from .reward import RewardConfig
from .surrogate import SurrogateConfig


@dataclass
class EnvConfig:
    chain: str = "arm6"              # bundled chain name or path to a chain-v1 file
    hand: str = "hand"               # bundled hand name or path to a hand-v1 file
    objects: str = "bundled"         # dataset directory or "bundled"
    table_height: float = 0.0
    table_lo: tuple = (-0.2, -0.55)
    table_hi: tuple = (0.8, 0.55)
    workspace_lo: tuple = (0.3, -0.25)   # object spawn region on the table
    workspace_hi: tuple = (0.62, 0.25)
    workspace_support: float = 0.75      # bbox fraction that must lie inside
    hand_box_lo: tuple = (0.25, -0.3, 0.12)  # accepted hand positions at spawn
    hand_box_hi: tuple = (0.62, 0.3, 0.42)
    stage1_offset: float = 0.15          # object distance from the palm, stage 1
    max_steps_train: int = 200
    max_steps_eval: int = 300
    obs_noise: bool = True
    pos_noise_sigma: float = 0.003       # meters, positions and distances
    rot_noise_sigma: float = math.radians(5.0)
    noise_clip_sigmas: float = 3.0
    voxel_size: float = 0.005
    sdf_padding: float = 0.04
    spawn_rejection_limit: int = 1000
    mass_distributions: dict = field(default_factory=lambda: {
        "drill": (1.4, 0.2),
        "spray_bottle": (0.5, 0.15),
        "mug": (0.3, 0.07),
    })
    stable_weights: tuple = (0.2, 0.4, 0.4)  # upright, left side, right side
    spawn_yaw_range: float = math.pi         # stage-2 yaw drawn from +-range

    def __post_init__(self):
        for name in ("table_lo", "table_hi", "workspace_lo", "workspace_hi"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 2:
                raise DataError(f"env config: {name} must have 2 elements")
            setattr(self, name, v)
        for name in ("hand_box_lo", "hand_box_hi"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise DataError(f"env config: {name} must have 3 elements")
            setattr(self, name, v)
        if not 0.0 < self.workspace_support <= 1.0:
            raise DataError("env config: workspace_support must be in (0, 1]")
        if self.max_steps_train < 1 or self.max_steps_eval < 1:
            raise DataError("env config: step caps must be positive")
        if self.pos_noise_sigma < 0 or self.rot_noise_sigma < 0:
            raise DataError("env config: noise sigmas must be non-negative")
        if self.spawn_rejection_limit < 1:
            raise DataError("env config: spawn_rejection_limit must be positive")
        w = tuple(float(x) for x in self.stable_weights)
        if len(w) != 3 or abs(sum(w) - 1.0) > 1e-9 or min(w) < 0:
            raise DataError("env config: stable_weights must be 3 non-negative values summing to 1")
        self.stable_weights = w
        if not 0.0 <= self.spawn_yaw_range <= math.pi + 1e-9:
            raise DataError("env config: spawn_yaw_range must be in [0, pi]")
        md = {}
        for k, v in self.mass_distributions.items():
            mean, sigma = float(v[0]), float(v[1])
            if mean <= 0 or sigma <= 0:
                raise DataError(f"env config: mass distribution for {k!r} must be positive")
            md[k] = (mean, sigma)
        self.mass_distributions = md


@dataclass
class CurriculumConfig:
    enabled: bool = True
    start_stage: int = 1
    threshold: float = 0.5
    window: int = 100                # trailing episodes per object
    min_episodes: int = 50           # per object before the window counts

    def __post_init__(self):
        if self.start_stage not in (1, 2):
            raise DataError("curriculum: start_stage must be 1 or 2")
        if not 0.0 < self.threshold <= 1.0:
            raise DataError("curriculum: threshold must be in (0, 1]")
        if self.window < 1 or self.min_episodes < 1:
            raise DataError("curriculum: window sizes must be positive")
        if self.min_episodes > self.window:
            raise DataError("curriculum: min_episodes cannot exceed window")


@dataclass
class TrainConfig:
    num_envs: int = 256
    horizon: int = 32
    epochs: int = 5
    minibatches: int = 4
    learning_rate: float = 3e-4
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    kl_target: float = 0.01
    kl_early_stop_factor: float = 1.5  # stop the update pass past this
    kl_abort_factor: float = 10.0      # give up on the run past this
    total_steps: int = 2_000_000
    normalize_obs: bool = True
    normalize_adv: bool = True
    log_std_init: float = -0.5
    checkpoint_every: int = 20   # iterations between checkpoint rewrites

    def __post_init__(self):
        if self.num_envs < 1 or self.horizon < 1 or self.epochs < 1:
            raise DataError("train config: sizes must be positive")
        if self.minibatches < 1 or (self.num_envs * self.horizon) % self.minibatches:
            raise DataError("train config: minibatches must divide the batch")
        for name in ("learning_rate", "clip_ratio", "kl_target",
                     "kl_early_stop_factor", "kl_abort_factor"):
            if getattr(self, name) <= 0:
                raise DataError(f"train config: {name} must be positive")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise DataError("train config: discount factors out of range")
        if self.total_steps < 1:
            raise DataError("train config: total_steps must be positive")
        if self.checkpoint_every < 1:
            raise DataError("train config: checkpoint_every must be positive")


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {
    "env": EnvConfig,
    "reward": RewardConfig,
    "surrogate": SurrogateConfig,
    "curriculum": CurriculumConfig,
    "train": TrainConfig,
}


def _build_section(cls, table: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise DataError(f"config [{section}]: unknown keys {sorted(unknown)}")
    return cls(**table)


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise DataError(f"config: unknown sections {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise DataError(f"config [{name}]: expected a table")
        parts[name] = _build_section(cls, table, name)
    return RunConfig(**parts)


def load_config(path=None) -> RunConfig:
    """Load a TOML run config; None means all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(data)


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-type dict round-trippable through config_from_dict."""
    return {
        section: _plain(dataclasses.asdict(getattr(cfg, section)))
        for section in _SECTIONS
    }
