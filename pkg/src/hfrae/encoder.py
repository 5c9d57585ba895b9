"""Frozen pretrained ResNet exposing its first three residual stages as a feature pyramid."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import torch
import torchvision
from torch import Tensor, nn

from .errors import ConfigError, ShapeError, WeightsUnavailableError

logger = logging.getLogger(__name__)

WEIGHTS_DIR_ENV = "HFRAE_WEIGHTS_DIR"

# torchvision ImageNet-1k checkpoints; filenames match torch.hub's cache naming.
_IMAGENET_WEIGHTS = {
    "resnet18": "https://download.pytorch.org/models/resnet18-f37072fd.pth",
    "wide_resnet50": "https://download.pytorch.org/models/wide_resnet50_2-95faca4d.pth",
}
_BUILDERS = {
    "resnet18": torchvision.models.resnet18,
    "wide_resnet50": torchvision.models.wide_resnet50_2,
}
STAGE_CHANNELS = {
    "resnet18": (64, 128, 256),
    "wide_resnet50": (256, 512, 1024),
}
ARCHITECTURES = tuple(_BUILDERS)

# Backbone-native input statistics (ImageNet).
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# stem (/4) then layer2 and layer3 each halve again
TOTAL_STRIDE = 16


@dataclass(frozen=True)
class BackboneSpec:
    """Which backbone to build and where its weights come from.

    ``weights_source`` is one of ``"imagenet"`` (cached torchvision checkpoint,
    downloaded on first use), a path to a ``.pth`` state dict, or
    ``"random"`` / ``"random:<seed>"`` for a seeded, non-pretrained backbone
    that lets the pipeline run without network access.
    """

    architecture: str = "resnet18"
    weights_source: str = "imagenet"
    levels: Tuple[int, ...] = field(default=(1, 2, 3))

    def __post_init__(self):
        if self.architecture not in _BUILDERS:
            raise ConfigError(
                f"unknown backbone architecture {self.architecture!r}; "
                f"expected one of {list(ARCHITECTURES)}"
            )
        levels = tuple(self.levels)
        if levels != (1, 2, 3):
            raise ConfigError(f"levels must be the first three residual stages (1, 2, 3), got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def channels(self) -> Tuple[int, ...]:
        return STAGE_CHANNELS[self.architecture]

    @property
    def is_pretrained(self) -> bool:
        return not self.weights_source.startswith("random")


@dataclass
class FeaturePyramid:
    """Encoder output: one ``(B, C_k, H_k, W_k)`` tensor per level, shallow to deep."""

    levels: List[Tensor]
    source_size: Tuple[int, int]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    @property
    def shapes(self) -> List[Tuple[int, int, int]]:
        return [tuple(f.shape[1:]) for f in self.levels]


def weights_cache_dir() -> Path:
    env = os.environ.get(WEIGHTS_DIR_ENV)
    if env:
        return Path(env)
    return Path(torch.hub.get_dir()) / "checkpoints"


def _resolve_state_dict(spec: BackboneSpec, allow_download: bool) -> dict:
    source = spec.weights_source
    if source == "imagenet":
        url = _IMAGENET_WEIGHTS[spec.architecture]
        path = weights_cache_dir() / Path(url).name
        if not path.exists():
            if not allow_download:
                raise WeightsUnavailableError(
                    f"{path} not found and downloads are disabled; place the torchvision "
                    f"checkpoint there or set {WEIGHTS_DIR_ENV}"
                )
            path.parent.mkdir(parents=True, exist_ok=True)
            try:
                torch.hub.download_url_to_file(url, str(path), progress=False)
            except Exception as exc:  # network errors come in many flavours
                raise WeightsUnavailableError(
                    f"could not download {url} ({exc}). Retry when online, or copy the file to "
                    f"{path} (override the directory with {WEIGHTS_DIR_ENV}); "
                    f"weights_source='random' runs without pretrained weights"
                ) from exc
    else:
        path = Path(source)
        if not path.is_file():
            raise WeightsUnavailableError(
                f"weights file {path} does not exist; pass 'imagenet', 'random[:seed]' or a valid path"
            )
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsUnavailableError(f"failed to read weights from {path}: {exc}") from exc


def _random_seed(source: str) -> int:
    _, _, seed = source.partition(":")
    try:
        return int(seed) if seed else 0
    except ValueError:
        raise ConfigError(f"bad random weights seed in {source!r}") from None


class Encoder(nn.Module):
    """ResNet stem plus residual stages 1-3, frozen and pinned to eval mode."""

    def __init__(self, spec: BackboneSpec, allow_download: bool = True):
        super().__init__()
        self.spec = spec
        builder = _BUILDERS[spec.architecture]
        if spec.is_pretrained:
            net = builder(weights=None)
            net.load_state_dict(_resolve_state_dict(spec, allow_download))
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(_random_seed(spec.weights_source))
                net = builder(weights=None)
            logger.warning("backbone %s built with random weights (%s)", spec.architecture, spec.weights_source)

        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # normalization layers must keep using their stored statistics
        return super().train(False)

    @property
    def channels(self) -> Tuple[int, ...]:
        return self.spec.channels

    def output_shapes(self, height: int, width: int) -> List[Tuple[int, int, int]]:
        """Pyramid level shapes ``(C_k, H_k, W_k)`` for an input of the given size."""
        check_input_size(height, width)
        return [(c, height // s, width // s) for c, s in zip(self.channels, (4, 8, 16))]

    def weight_hash(self) -> str:
        """SHA-256 over every parameter and buffer, in state-dict order."""
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def forward(self, x: Tensor) -> List[Tensor]:
        check_input_size(x.shape[-2], x.shape[-1])
        x = self.stem(x)
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return [f1, f2, f3]


def check_input_size(height: int, width: int):
    if height % TOTAL_STRIDE or width % TOTAL_STRIDE or height <= 0 or width <= 0:
        raise ShapeError(
            f"input size {height}x{width} must be a positive multiple of {TOTAL_STRIDE}"
        )


def build_encoder(spec: Union[BackboneSpec, str], allow_download: bool = True) -> Encoder:
    if isinstance(spec, str):
        spec = BackboneSpec(architecture=spec)
    return Encoder(spec, allow_download=allow_download)


def extract_features(encoder: Encoder, batch: Tensor) -> FeaturePyramid:
    """Run the frozen encoder on a preprocessed ``(B, 3, H, W)`` batch."""
    if batch.ndim == 3:
        batch = batch.unsqueeze(0)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected a (B, 3, H, W) batch, got {tuple(batch.shape)}")
    return FeaturePyramid(levels=encoder(batch), source_size=tuple(batch.shape[-2:]))


def pyramid_shapes(pyramid: Union[FeaturePyramid, Sequence[Tensor]]) -> List[Tuple[int, ...]]:
    levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else pyramid
    return [tuple(f.shape[-3:]) for f in levels]
