"""Layered run configuration: built-in defaults < YAML file < ``key=value`` overrides.

The file has one mapping per section::

    train:     {dataset_dir: data/train, max_steps: 2000, ...}
    net:       {preset: small, width: 16, input_hw: [128, 128]}
    loss:      {mask_stage: [0.5, 1, 1, 1, 1, 1], iou: 1.0, ...}
    generator: {image_hw: [128, 128], opacity_range: [0.3, 1.0], ...}
    eval:      {mask_mode: soft, miou_threshold: 0.5, ...}

Overrides address a key as ``section.key``, e.g. ``train.max_steps=10``.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .metrics import EvalConfig
from .model import NetConfig
from .synthgen import GeneratorConfig


@dataclass
class TrainConfig:
    dataset_dir: str = ""
    out_dir: str = "runs/demark"
    val_dir: str | None = None
    batch_size: int = 8
    max_steps: int = 1000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float | None = None
    seed: int = 0
    checkpoint_every: int = 100
    device: str = "cpu"
    deterministic: bool = True
    # random horizontal flips, drawn per (seed, step, sample)
    augment: bool = False
    # synthesize samples on the fly from this background directory instead of
    # reading a pre-generated dataset
    backgrounds_dir: str | None = None
    on_the_fly_size: int = 10000
    # threads loading batch samples; results keep index order
    workers: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


NET_KEYS = {"preset", "width", "input_hw", "encoder", "mask_decoder", "image_decoder",
            "in_channels", "mask_channels", "image_channels"}


def net_config_from_dict(d: dict) -> NetConfig:
    d = dict(d)
    unknown = set(d) - NET_KEYS
    if unknown:
        raise ConfigError(f"unknown net keys: {sorted(unknown)}")
    input_hw = tuple(d.get("input_hw", (512, 512)))
    if "encoder" in d:
        d.pop("preset", None)
        d.pop("width", None)
        d["input_hw"] = input_hw
        return NetConfig.from_dict(d)
    preset = d.get("preset", "default")
    if preset == "default":
        return NetConfig.default(input_hw)
    if preset == "small":
        return NetConfig.small(input_hw, width=int(d.get("width", 16)))
    raise ConfigError(f"unknown net preset {preset!r}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    net: dict = field(default_factory=lambda: {"preset": "default", "width": 16, "input_hw": [512, 512]})
    loss: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def net_config(self) -> NetConfig:
        return net_config_from_dict(self.net)

    def to_dict(self) -> dict:
        return {
            "train": asdict(self.train),
            "net": copy.deepcopy(self.net),
            "loss": asdict(self.loss),
            "generator": asdict(self.generator),
            "eval": asdict(self.eval),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.to_dict()), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(
                train=TrainConfig(**d["train"]),
                net=dict(d["net"]),
                loss=LossWeights.from_dict(d["loss"]),
                generator=GeneratorConfig.from_dict(d["generator"]),
                eval=EvalConfig.from_dict(d["eval"]),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _allowed_keys(section: str) -> set[str] | None:
    return {
        "train": {f.name for f in fields(TrainConfig)},
        "net": NET_KEYS,
        "loss": {f.name for f in fields(LossWeights)},
        "generator": {f.name for f in fields(GeneratorConfig)},
        "eval": {f.name for f in fields(EvalConfig)},
    }.get(section)


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    if "." not in key:
        raise ConfigError(f"override key {key!r} must be section.key")
    section, name = key.split(".", 1)
    allowed = _allowed_keys(section)
    if allowed is None:
        raise ConfigError(f"unknown config section {section!r}")
    if name not in allowed:
        raise ConfigError(f"unknown config key {section}.{name}")
    return section, name, yaml.safe_load(raw) if raw != "" else None


def load_config(path=None, overrides=()) -> RunConfig:
    base = RunConfig().to_dict()
    base = _plain(base)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a mapping of sections")
        for section, values in data.items():
            allowed = _allowed_keys(section)
            if allowed is None:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            unknown = set(values) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
            base[section].update(values)
    for text in overrides:
        section, name, value = parse_override(text)
        base[section][name] = value
    env_device = os.environ.get("DEMARK_DEVICE")
    if env_device:
        base["train"]["device"] = env_device
    cfg = RunConfig.from_dict(base)
    cfg.net_config()  # validate eagerly
    return cfg
