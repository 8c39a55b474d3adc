"""Strict run configuration: one YAML file, one section per subsystem, every field defaulted."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dataset import DatasetError, PatchMaskSpec, PhantomSpec
from .diffusion import make_schedule
from .iffn import IFFNConfig
from .model import ModelConfig
from .spectral import SpectralConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "AMMDIFF_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = ""  # defaults to <output_dir>/data
    n_subjects: int = 64
    height: int = 64
    width: int = 64
    lesion_probability: float = 0.7
    slices_per_subject: int = 1
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    patch_size: int = 16
    mask_ratio: float = 0.5


@dataclass
class SpectralSection:
    cutoff_radius: float = 0.25
    smoothness: float = 1.0
    equalization_bins: int = 256


@dataclass
class ScheduleSection:
    # linear schedule rescaled by 1000/T so that alpha_bar[T-1] ~ 3e-5 and x_T is close to N(0, I)
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    kind: str = "linear"


@dataclass
class IFFNSection:
    base_channels: int = 16
    rep_channels: int = 32
    n_res_blocks: int = 2
    predictor_hidden: int = 128


@dataclass
class ModelSection:
    base_channels: int = 16
    channel_mult: list = field(default_factory=lambda: [1, 2, 2])
    parameterization: str = "v"


@dataclass
class TrainSection:
    pretrain_steps: int = 500
    train_steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    pretrain_lr: float = 1e-3
    grad_clip: float = 1.0
    log_every: int = 50
    val_every: int = 1000
    val_samples: int = 2
    iffn_lr_scale: float = 1.0


@dataclass
class EvalSection:
    split: str = "test"
    all_configs: bool = False
    max_samples: int = 0  # 0 means the whole split
    batch_size: int = 64


SECTIONS = {
    "data": DataSection,
    "spectral": SpectralSection,
    "schedule": ScheduleSection,
    "iffn": IFFNSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    iffn: IFFNSection = field(default_factory=IFFNSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - {"seed", "output_dir", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key in ("seed", "output_dir"):
            if key in raw:
                kwargs[key] = raw[key]
        for name, section_cls in SECTIONS.items():
            body = raw.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**body)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
        return cls.from_dict(raw)

    def override(self, dotted: str, value: str) -> None:
        """Apply a `section.key=value` flag override; the value is parsed as YAML."""
        parsed = yaml.safe_load(value)
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] in ("seed", "output_dir"):
            setattr(self, parts[0], parsed)
        elif len(parts) == 2 and parts[0] in SECTIONS:
            section = getattr(self, parts[0])
            if parts[1] not in {f.name for f in dataclasses.fields(section)}:
                raise ConfigError(f"unknown config key {dotted!r}")
            setattr(section, parts[1], parsed)
        else:
            raise ConfigError(f"unknown config key {dotted!r}")
        self.validate()

    def validate(self) -> None:
        try:
            self.phantom_spec()
            self.patch_spec()
            self.spectral_config()
            self.make_schedule()
            self.iffn_config()
            self.model_config()
        except (TypeError, ValueError, DatasetError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")

    # -- views -------------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)

    @property
    def data_root(self) -> Path:
        return Path(self.data.root) if self.data.root else self.out / "data"

    def phantom_spec(self) -> PhantomSpec:
        d = self.data
        spec = PhantomSpec(str(self.data_root), d.n_subjects, d.height, d.width, self.seed,
                           d.lesion_probability, d.slices_per_subject)
        spec.validate()
        return spec

    def patch_spec(self) -> PatchMaskSpec:
        return PatchMaskSpec(self.data.patch_size, self.data.mask_ratio)

    def spectral_config(self) -> SpectralConfig:
        return SpectralConfig(**asdict(self.spectral))

    def make_schedule(self):
        s = self.schedule
        return make_schedule(s.T, s.beta_start, s.beta_end, s.kind)

    def iffn_config(self) -> IFFNConfig:
        return IFFNConfig(in_modalities=4, **asdict(self.iffn))

    def model_config(self, conditioning: str = "iffn") -> ModelConfig:
        return ModelConfig(n_modalities=4, base_channels=self.model.base_channels,
                           channel_mult=tuple(self.model.channel_mult), conditioning=conditioning,
                           parameterization=self.model.parameterization)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()
