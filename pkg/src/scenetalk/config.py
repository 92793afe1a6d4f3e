"""Run configuration: dataclasses, JSON loading and the shipped presets.

``default.json`` carries the reference hyperparameters; ``micro.json`` is a
deliberately small setup whose training finishes in minutes on one CPU core
and is what the acceptance-style end-to-end tests run.  JSON files may omit
sections or fields (defaults fill in) but unknown keys are rejected so
typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple

from .codec import CodecConfig
from .model import UNetConfig
from .synth import WorldConfig


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 4)
    blocks_per_scale: int = 2
    attention_scales: Tuple[int, ...] = (1, 2, 3)
    cross_attention_scales: Tuple[int, ...] = (1, 2, 3)
    cond_embed_dim: int = 128
    head_dim: int = 64
    time_embed_dim: int = 128
    dropout: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 8
    steps: int = 2000
    ema_decay: float = 0.9999
    grad_clip: float = 1.0
    rollout_finetune_steps: int = 0
    log_every: int = 100
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    embedder_dim: int = 64
    embedder_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def unet_config(self) -> UNetConfig:
        """Derives the denoiser architecture from world and codec settings."""
        latent_channels = self.codec.latent_channels(3)
        return UNetConfig(
            in_channels=latent_channels,
            cv_channels=latent_channels,
            base_channels=self.model.base_channels,
            channel_mult=self.model.channel_mult,
            blocks_per_scale=self.model.blocks_per_scale,
            attention_scales=self.model.attention_scales,
            cross_attention_scales=self.model.cross_attention_scales,
            cond_embed_dim=self.model.cond_embed_dim,
            head_dim=self.model.head_dim,
            time_embed_dim=self.model.time_embed_dim,
            dropout=self.model.dropout)

    def conditioning(self) -> dict:
        return {"audio_dim": self.world.audio_dim,
                "identity_dim": 6,
                "lip_channels": 1}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "world": WorldConfig,
    "codec": CodecConfig,
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


class ConfigError(Exception):
    """The configuration file is malformed."""


def _build_section(cls, data: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, data.get(name, {}), name)
    return RunConfig(**sections)


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Loads a JSON config file; with no path, returns the default preset."""
    if path is None:
        return load_preset("default")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def load_preset(name: str) -> RunConfig:
    ref = resources.files("scenetalk.configs").joinpath(f"{name}.json")
    if not ref.is_file():
        raise ConfigError(f"no packaged config preset named {name!r}")
    return config_from_dict(json.loads(ref.read_text()))
