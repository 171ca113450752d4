"""Run configuration: dataclasses with JSON file loading and overrides."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .. import tokenizers
from ..transformer import ModelConfig


class TrainMode(enum.Enum):
    JOINT_ORDERED = "joint_ordered"
    JOINT_PACKED = "joint_packed"
    ALTERNATING = "alternating"


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 2000
    views: int = 8
    resolution: int = 32
    seed: int = 0
    radius_range: tuple = (1.8, 3.2)
    elevation_range_deg: tuple = (-10.0, 70.0)
    lookat_jitter: float = 0.05


@dataclass(frozen=True)
class TokenizerTrainConfig:
    base_channels: int = 48
    num_downsamples: int = 2
    codebook_size: int = 512
    codebook_dim: int = 4
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    commitment_weight: float = 0.25
    seed: int = 1
    data_init: bool = True


@dataclass(frozen=True)
class GstTrainConfig:
    """Settings for the joint/alternating next-token training loop.

    ordering_weights are the probabilities assigned to the four
    conditionals in the order [p(i|c,o), p(c|o), p(c|i,o), p(i|o)]; the
    two branch probabilities are the pairwise sums. late_ordering_weights,
    when set, replace them from late_phase_frac onward.
    """

    mode: TrainMode = TrainMode.JOINT_ORDERED
    ordering_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    late_ordering_weights: tuple | None = None
    late_phase_frac: float = 0.8
    steps: int = 30000
    batch_size: int = 32
    lr: float = 1e-4
    final_lr: float = 1e-5
    lr_drop_frac: float = 0.8
    grad_clip: float = 1.0
    grad_accumulation: int = 1
    weight_decay: float = 0.01
    seed: int = 2
    log_every: int = 50
    include_task_in_loss: bool = False

    def __post_init__(self):
        total = sum(self.ordering_weights)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("ordering_weights must sum to 1")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    def branch_weight_cam_first(self, step: int) -> float:
        w = self.ordering_weights
        if (
            self.late_ordering_weights is not None
            and step >= self.late_phase_frac * self.steps
        ):
            w = self.late_ordering_weights
        return w[0] + w[1]

    def lr_at(self, step: int) -> float:
        return self.lr if step < self.lr_drop_frac * self.steps else self.final_lr


@dataclass(frozen=True)
class SamplingConfig:
    image_temperature: float = 1.0
    image_top_k: int = 64
    camera_temperature: float = 0.7
    camera_top_k: int = 32


@dataclass(frozen=True)
class EvalConfig:
    pairs: int = 64
    prior_samples: int = 200
    baseline_trials: int = 2000
    seed: int = 3


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    image_tokenizer: TokenizerTrainConfig = field(default_factory=TokenizerTrainConfig)
    camera_tokenizer: TokenizerTrainConfig = field(
        default_factory=lambda: TokenizerTrainConfig(base_channels=20)
    )
    model: ModelConfig = field(default_factory=ModelConfig)
    train: GstTrainConfig = field(default_factory=GstTrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def image_tokenizer_model_config(self) -> tokenizers.TokenizerConfig:
        c = self.image_tokenizer
        res = (self.data.resolution, self.data.resolution)
        return tokenizers.image_tokenizer_config(
            res, base_channels=c.base_channels, num_downsamples=c.num_downsamples,
            codebook_size=c.codebook_size, codebook_dim=c.codebook_dim,
        )

    def camera_tokenizer_model_config(self) -> tokenizers.TokenizerConfig:
        c = self.camera_tokenizer
        res = (self.data.resolution, self.data.resolution)
        return tokenizers.camera_tokenizer_config(
            res, base_channels=c.base_channels, num_downsamples=c.num_downsamples,
            codebook_size=c.codebook_size, codebook_dim=c.codebook_dim,
        )


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(config: RunConfig) -> dict:
    out = {}
    for section in dataclasses.fields(config):
        value = getattr(config, section.name)
        out[section.name] = {
            f.name: _to_jsonable(getattr(value, f.name))
            for f in dataclasses.fields(value)
        }
    return out


_SECTION_TYPES = {
    "data": DataConfig,
    "image_tokenizer": TokenizerTrainConfig,
    "camera_tokenizer": TokenizerTrainConfig,
    "model": ModelConfig,
    "train": GstTrainConfig,
    "sampling": SamplingConfig,
    "eval": EvalConfig,
}


def _build_section(cls, defaults, overrides: dict):
    kwargs = {}
    valid = {f.name: f for f in dataclasses.fields(cls)}
    for name in overrides:
        if name not in valid:
            raise ValueError(f"unknown config field {cls.__name__}.{name}")
    for name, fld in valid.items():
        if name in overrides:
            value = overrides[name]
        else:
            value = getattr(defaults, name)
        if name == "mode" and isinstance(value, str):
            value = TrainMode(value)
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    sections = {}
    for name in data:
        if name not in _SECTION_TYPES:
            raise ValueError(f"unknown config section {name!r}")
    for name, cls in _SECTION_TYPES.items():
        sections[name] = _build_section(
            cls, getattr(base, name), data.get(name, {})
        )
    return RunConfig(**sections)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(path: str | Path, config: RunConfig) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"
    )
