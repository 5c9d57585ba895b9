"""Trainable decoder reconstructing the encoder pyramid from its deepest level."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

K_LEVELS = 3


@dataclass(frozen=True)
class DecoderSpec:
    per_level_channels: Tuple[int, ...]
    block_kernel_sizes: Tuple[int, ...] = (1, 3, 1)
    negative_slope: float = 0.1
    upsample_factor: int = 2

    def __post_init__(self):
        object.__setattr__(self, "per_level_channels", tuple(int(c) for c in self.per_level_channels))
        object.__setattr__(self, "block_kernel_sizes", tuple(int(k) for k in self.block_kernel_sizes))
        if len(self.per_level_channels) != K_LEVELS:
            raise ConfigError(
                f"per_level_channels needs {K_LEVELS} entries, got {len(self.per_level_channels)}"
            )
        if any(k % 2 == 0 for k in self.block_kernel_sizes):
            raise ConfigError("block kernel sizes must be odd to preserve spatial size")
        if self.upsample_factor < 1:
            raise ConfigError("upsample_factor must be a positive integer")


def conv_block(in_ch: int, out_ch: int, kernel_size: int, negative_slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(negative_slope),
    )


class DecoderStage(nn.Module):
    """Conv blocks for one level plus its 1x1 channel-integration output head.

    ``forward`` returns ``(hidden, output)``; the next (shallower) stage
    consumes ``hidden``, while ``output`` is the reconstructed feature.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_sizes: Sequence[int], negative_slope: float):
        super().__init__()
        blocks, ch = [], in_ch
        for k in kernel_sizes:
            blocks.append(conv_block(ch, out_ch, k, negative_slope))
            ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(out_ch, out_ch, 1)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        hidden = self.blocks(x)
        return hidden, self.head(hidden)


class Decoder(nn.Module):
    """Deep-to-shallow reconstruction of a three-level feature pyramid.

    The deepest encoded feature enters the deepest stage directly; every
    shallower stage sees the previous stage's hidden representation after
    nearest-neighbour upsampling. Outputs are returned shallow to deep so they
    line up index-for-index with the encoder pyramid.
    """

    def __init__(self, spec: DecoderSpec, encoder_shapes: Sequence[Tuple[int, int, int]]):
        super().__init__()
        self.spec = spec
        self.encoder_shapes = [tuple(int(v) for v in s) for s in encoder_shapes]
        deep_first = list(reversed(spec.per_level_channels))
        stages, in_ch = [], deep_first[0]
        for ch in deep_first:
            stages.append(DecoderStage(in_ch, ch, spec.block_kernel_sizes, spec.negative_slope))
            in_ch = ch
        # stages[0] handles the deepest level
        self.stages = nn.ModuleList(stages)
        # persisted with the weights so evaluation can flag untrained checkpoints
        self.register_buffer("epochs_trained", torch.zeros((), dtype=torch.long))

    def upsample(self, x: Tensor) -> Tensor:
        return F.interpolate(x, scale_factor=self.spec.upsample_factor, mode="nearest")

    def forward(self, deepest: Tensor) -> List[Tensor]:
        c_deep, h_deep, w_deep = self.encoder_shapes[-1]
        if deepest.ndim != 4 or deepest.shape[1] != c_deep:
            raise ShapeError(
                f"decoder expects (B, {c_deep}, H, W) input, got {tuple(deepest.shape)}"
            )
        outputs = []
        x = deepest
        for i, stage in enumerate(self.stages):
            if i:
                x = self.upsample(x)
            x, out = stage(x)
            outputs.append(out)
        outputs.reverse()
        return outputs


def _check_shapes(spec: DecoderSpec, shapes: Sequence[Tuple[int, int, int]]):
    if len(shapes) != K_LEVELS:
        raise ConfigError(f"expected {K_LEVELS} encoder shapes, got {len(shapes)}")
    for (c, _, _), c_spec in zip(shapes, spec.per_level_channels):
        if c != c_spec:
            raise ConfigError(
                f"decoder channels {spec.per_level_channels} disagree with encoder shapes {list(shapes)}"
            )
    f = spec.upsample_factor
    for (_, h_shallow, w_shallow), (_, h_deep, w_deep) in zip(shapes[:-1], shapes[1:]):
        if (h_deep * f, w_deep * f) != (h_shallow, w_shallow):
            raise ShapeError(
                f"upsampling {h_deep}x{w_deep} by {f} gives {h_deep * f}x{w_deep * f}, "
                f"but the next level is {h_shallow}x{w_shallow}"
            )


def build_decoder(
    spec: DecoderSpec,
    encoder_shapes: Sequence[Tuple[int, int, int]],
    seed: Optional[int] = None,
) -> Decoder:
    """Build a decoder whose outputs shape-match ``encoder_shapes`` (shallow to deep).

    Convolutions use PyTorch's default fan-in scaled init and batch norm starts
    at identity; ``seed`` makes the initialization reproducible without touching
    the global RNG state.
    """
    _check_shapes(spec, encoder_shapes)
    if seed is None:
        return Decoder(spec, encoder_shapes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Decoder(spec, encoder_shapes)


def reconstruct(decoder: Decoder, deepest: Tensor) -> List[Tensor]:
    """Reconstructed pyramid ``[f_dec^1, ..., f_dec^K]`` from the deepest encoded level."""
    return decoder(deepest)
