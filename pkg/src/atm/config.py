"""Training configuration.

Defaults for the tracker and policy sections are the published hyperparameter
tables; everything else is a desk-scale default.  Config files are JSON and
may name a ``base`` file that they override (paths resolve relative to the
overriding file).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .synthetic_env import DEFAULT_TASKS, EnvConfig, TaskSpec


class ConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    shift_pad: int = 4  # random shift of up to this many pixels per axis
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2


@dataclass
class AnnotationConfig:
    grid_size: int = 16
    var_threshold: float = 1e-3  # normalized units^2
    num_points: int = 32
    radius: float = 0.05
    variance_mode: str = "axis_sum"  # or "displacement"

    def validate(self):
        if self.grid_size < 1:
            raise ConfigError("annotation.grid_size must be >= 1")
        if self.var_threshold < 0:
            raise ConfigError("annotation.var_threshold must be >= 0")
        if self.num_points < 1:
            raise ConfigError("annotation.num_points must be >= 1")
        if not 0 < self.radius <= 1:
            raise ConfigError("annotation.radius must be in (0, 1]")
        if self.variance_mode not in ("axis_sum", "displacement"):
            raise ConfigError(f"annotation.variance_mode: unknown {self.variance_mode!r}")


@dataclass
class TrackerConfig:
    epochs: int = 100
    batch_size: int = 1024
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    warmup_epochs: int = 5
    clip_grad: float = 10.0
    num_points: int = 32
    track_length: int = 16
    track_patch_size: int = 4
    image_mask_ratio: float = 0.5
    img_loss_weight: float = 1.0
    augment: bool = True
    image_patch_size: int = 8
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    lang_dim: int = 32
    mask_invisible_loss: bool = False
    tie_view_weights: bool = False
    val_fraction: float = 0.1
    samples_per_episode: int = 0  # 0 -> every window start once per epoch

    def validate(self):
        if self.track_length % self.track_patch_size:
            raise ConfigError(
                f"tracker.track_length ({self.track_length}) must be divisible by "
                f"tracker.track_patch_size ({self.track_patch_size})"
            )
        if not 0 <= self.image_mask_ratio <= 1:
            raise ConfigError("tracker.image_mask_ratio must be in [0, 1]")
        if self.num_points < 1:
            raise ConfigError("tracker.num_points must be >= 1")
        if self.img_loss_weight < 0:
            raise ConfigError("tracker.img_loss_weight must be >= 0")
        if self.dim % self.heads:
            raise ConfigError("tracker.dim must be divisible by tracker.heads")


@dataclass
class PolicyConfig:
    epochs: int = 100
    batch_size: int = 512
    optimizer: str = "adamw"
    lr: float = 5e-4
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    warmup_epochs: int = 0
    clip_grad: float = 100.0
    num_points: int = 32
    grid_rows: int = 4
    grid_cols: int = 8
    track_length: int = 16
    frame_stack: int = 10
    augment: bool = True
    early_fusion: bool = True
    late_fusion: bool = True
    use_proprio: bool = False
    image_patch_size: int = 8
    dim: int = 64
    spatial_depth: int = 2
    temporal_depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    head_hidden: int = 256
    lang_dim: int = 32

    def validate(self):
        if self.grid_rows * self.grid_cols != self.num_points:
            raise ConfigError(
                f"policy.num_points={self.num_points} is not grid_rows x grid_cols "
                f"({self.grid_rows} x {self.grid_cols})"
            )
        if self.frame_stack < 1:
            raise ConfigError("policy.frame_stack must be >= 1")
        if self.dim % self.heads:
            raise ConfigError("policy.dim must be divisible by policy.heads")


@dataclass
class DataConfig:
    tasks: list = field(default_factory=lambda: [t.to_dict() for t in DEFAULT_TASKS])
    num_videos: int = 50  # per task
    num_demos: int = 10  # per task
    video_embodiment: str = "cursor"
    demo_embodiment: str = "cursor"

    def task_specs(self) -> list[TaskSpec]:
        return [TaskSpec.from_dict(t) for t in self.tasks]


@dataclass
class EvalConfig:
    episodes: int = 50  # per task
    seed_offset: int = 100_000  # eval layout seeds start here


@dataclass
class TrainConfig:
    seed: int = 0
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "TrainConfig":
        self.annotation.validate()
        self.tracker.validate()
        self.policy.validate()
        if self.env.image_size % self.tracker.image_patch_size:
            raise ConfigError("env.image_size must be divisible by tracker.image_patch_size")
        if self.env.image_size % self.policy.image_patch_size:
            raise ConfigError("env.image_size must be divisible by policy.image_patch_size")
        if self.policy.track_length > self.tracker.track_length:
            raise ConfigError("policy.track_length cannot exceed tracker.track_length")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "").validate()

    def section_hash(self, *sections: str) -> str:
        d = self.to_dict()
        payload = {s: d[s] for s in sections} if sections else d
        return config_hash(payload)


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config_dict(path) -> dict:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    base = d.pop("base", None)
    if base is None:
        return d
    return deep_merge(load_config_dict(path.parent / base), d)


def load_config(*paths, overrides: dict | None = None) -> TrainConfig:
    """Resolve layered config files (later files win) into a validated config."""
    merged: dict = {}
    for p in paths:
        merged = deep_merge(merged, load_config_dict(p))
    if overrides:
        merged = deep_merge(merged, overrides)
    return TrainConfig.from_dict(merged)


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
