"""Run configuration: one YAML file with backbone/decoder/train/data/inference sections."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Union

import yaml

from .decoder import DecoderSpec
from .encoder import BackboneSpec
from .errors import ConfigError
from .trainer import InferenceConfig, TrainConfig

DATASET_KINDS = ("mvtec", "mnist", "fashion_mnist", "cifar10", "image_folder")


@dataclass
class BackboneSection:
    architecture: str = "resnet18"
    weights_source: str = "imagenet"
    allow_download: bool = True


@dataclass
class DecoderSection:
    block_kernel_sizes: List[int] = field(default_factory=lambda: [1, 3, 1])
    negative_slope: float = 0.1
    upsample_factor: int = 2
    seed: int = 0


@dataclass
class DataSection:
    root: Optional[str] = None
    kind: str = "mvtec"
    categories: List[str] = field(default_factory=list)
    normal_classes: List[int] = field(default_factory=list)
    resolution: int = 256
    max_train: Optional[int] = None
    max_test: Optional[int] = None


@dataclass
class InferenceSection:
    sigma: float = 4.0
    level_scaling: str = "spatial"
    fpr_cap: float = 0.3
    pixel_bins: int = 4096
    per_image_pixel_auroc: bool = False
    batch_size: int = 16
    output_dir: str = "runs"


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    train: dict = field(default_factory=dict)
    data: DataSection = field(default_factory=DataSection)
    inference: InferenceSection = field(default_factory=InferenceSection)

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.backbone.architecture, self.backbone.weights_source)

    def decoder_spec(self, channels: Sequence[int]) -> DecoderSpec:
        return DecoderSpec(
            per_level_channels=tuple(channels),
            block_kernel_sizes=tuple(self.decoder.block_kernel_sizes),
            negative_slope=self.decoder.negative_slope,
            upsample_factor=self.decoder.upsample_factor,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def inference_config(self) -> InferenceConfig:
        d = asdict(self.inference)
        d.pop("output_dir")
        return InferenceConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = asdict(self.train_config())
        return d


_SECTIONS = {
    "backbone": BackboneSection,
    "decoder": DecoderSection,
    "data": DataSection,
    "inference": InferenceSection,
    "train": TrainConfig,
}


def _build_section(name, cls, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown field(s) in '{name}': {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw or {})
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    built = {name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    train = raw.get("train") or {}
    cfg = RunConfig(
        backbone=built["backbone"],
        decoder=built["decoder"],
        train=dict(train),
        data=built["data"],
        inference=built["inference"],
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if not cfg.data.root:
        raise ConfigError("data.root is required")
    if cfg.data.kind not in DATASET_KINDS:
        raise ConfigError(f"data.kind must be one of {DATASET_KINDS}, got {cfg.data.kind!r}")
    if cfg.data.kind != "mvtec" and not cfg.data.normal_classes:
        raise ConfigError("data.normal_classes is required for one-class datasets")
    if cfg.data.resolution % 16:
        raise ConfigError(f"data.resolution must be a multiple of 16, got {cfg.data.resolution}")
    cfg.backbone_spec()
    cfg.train_config()
    cfg.inference_config()


def parse_override(text: str):
    """``section.key=value`` with the value parsed as YAML."""
    key, sep, value = text.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot or not name:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    return section, name, yaml.safe_load(value)


def load_config(path: Union[str, Path, None] = None, overrides: Sequence[str] = (), **sections) -> RunConfig:
    """Read a YAML config, then apply ``section.key=value`` overrides and keyword sections."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
    for section, values in sections.items():
        raw.setdefault(section, {}).update(values)
    for text in overrides:
        section, name, value = parse_override(text)
        if raw.get(section) is None:
            raw[section] = {}
        raw[section][name] = value
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
