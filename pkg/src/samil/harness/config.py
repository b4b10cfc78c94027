"""Experiment configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from samil.errors import ConfigurationError
from samil.milmodel import VARIANTS, ModelConfig

PRETRAIN_MODES = ("none", "img-cl", "bag-cl")


@dataclass
class PretrainConfig:
    epochs: int = 40
    patience: int = 15
    lr: float = 0.00015
    lr_scale: float = 1.0
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 16  # studies per bag-level step
    img_batch_size: int = 512
    img_lr: float = 0.06
    # kept below the size of the pretraining pool so a study rarely meets its own stale key
    queue_size: int = 256
    queue_prefill: int | None = None  # keys of augmented pool units placed in the queue first; None fills it
    key_momentum: float = 0.99
    temperature: float = 0.1
    knn_k: int = 5
    attention: str = "combined"  # or "supervised" (A only)
    steps_per_epoch: int | None = None
    seed: int = 0
    # Augmentation. Crop-and-resize is off by default because rescaling an
    # image changes ring width and blob spread, which is how severity shows.
    crop_scale: tuple = (1.0, 1.0)
    flip_prob: float = 0.5
    noise_std: float = 0.05
    brightness: float = 0.2
    shift: int = 0
    rotate: bool = True
    contrast: float = 0.0
    standardize: bool = True  # running standardisation of the projection-head input
    stat_rate: float = 0.01

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)


@dataclass
class ExperimentConfig:
    variant: str = "samil"
    pretrain: str = "none"
    lambda_sa: float = 15.0
    tau_v: float = 0.05
    lr: float = 0.01
    weight_decay: float = 0.0001
    momentum: float = 0.9
    epochs: int = 200
    patience: int = 40
    batch_size: int = 16
    seed: int = 0
    dataset: str | None = None
    run_dir: str | None = None
    pretrain_checkpoint: str | None = None
    hidden: tuple = (500, 250, 500)
    attention_dim: int = 128
    dtype: str = "float32"
    sa_stop_gradient: bool = False
    lambda_sa_grid: tuple = (5.0, 15.0, 20.0)
    tau_v_grid: tuple = (0.1, 0.05, 0.03)
    generator: dict = field(default_factory=dict)
    pretraining: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.lambda_sa_grid = tuple(self.lambda_sa_grid)
        self.tau_v_grid = tuple(self.tau_v_grid)
        if isinstance(self.pretraining, dict):
            names = {f.name for f in dataclasses.fields(PretrainConfig)}
            unknown = set(self.pretraining) - names
            if unknown:
                raise ConfigurationError(f"unknown pretraining keys: {sorted(unknown)}")
            self.pretraining = PretrainConfig(**self.pretraining)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pretrain not in PRETRAIN_MODES:
            raise ConfigurationError(f"pretrain must be one of {PRETRAIN_MODES}, got {self.pretrain!r}")
        if not self.lambda_sa_grid or not self.tau_v_grid:
            raise ConfigurationError("hyperparameter grids must be non-empty")
        if self.epochs < 1 or self.patience < 0 or self.patience > self.epochs:
            raise ConfigurationError(f"need epochs >= 1 and 0 <= patience <= epochs ({self.patience}, {self.epochs})")
        if self.lambda_sa < 0 or self.tau_v <= 0:
            raise ConfigurationError("lambda_sa must be >= 0 and tau_v > 0")
        if self.lr < 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigurationError("lr, weight_decay must be >= 0 and batch_size >= 1")
        return self

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            hidden=self.hidden,
            attention_dim=self.attention_dim,
            variant=self.variant,
            sa_stop_gradient=self.sa_stop_gradient,
            dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
