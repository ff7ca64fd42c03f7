"""Residual encoder with output stride 16 and a dilated final stage.

Desk-scale stand-in for a deep classification backbone: a three-conv 3x3
stem (first conv stride 2) followed by a stride-2 max pool, then four
stages of basic residual blocks. Stage 4 trades its stride for dilation so
the deepest features keep 1/16 of the input resolution while the receptive
field still grows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import ConvBN, Conv2d, BatchNorm2d, Module
from .tensor import Tensor, Tape, ShapeError, add, relu


class ConfigError(ValueError):
    """A structural configuration field is invalid."""


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    final_stage_dilation: int = 2
    output_stride: int = 16

    def validate(self) -> "BackboneConfig":
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be positive, got {self.stem_channels}")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage must be 4 positive ints, got {self.blocks_per_stage}")
        if self.final_stage_dilation < 1:
            raise ConfigError(f"final_stage_dilation must be >= 1, got {self.final_stage_dilation}")
        if self.output_stride != 16:
            raise ConfigError(f"output_stride must be 16, got {self.output_stride}")
        return self


@dataclass
class StageFeatures:
    """Outputs of the four residual stages, at strides 4, 8, 16, 16."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


class BasicBlock(Module):
    """Two 3x3 convs with an identity or 1x1-projection shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 dilation: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvBN(in_channels, out_channels, 3, rng=rng, stride=stride,
                            dilation=dilation, relu=True)
        self.conv2 = ConvBN(out_channels, out_channels, 3, rng=rng, dilation=dilation)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ConvBN(in_channels, out_channels, 1, rng=rng, stride=stride)
        else:
            self.shortcut = None

    def forward(self, tape: Tape | None, x: Tensor) -> Tensor:
        out = self.conv2(tape, self.conv1(tape, x))
        skip = self.shortcut(tape, x) if self.shortcut is not None else x
        return relu(add(out, skip, tape), tape)


class Stage(Module):
    def __init__(self, in_channels: int, out_channels: int, blocks: int,
                 stride: int, dilation: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = []
        for i in range(blocks):
            block = BasicBlock(in_channels if i == 0 else out_channels, out_channels,
                               stride if i == 0 else 1, dilation, rng)
            self.add_module(f"block{i}", block)
            self.blocks.append(block)

    def forward(self, tape: Tape | None, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(tape, x)
        return x


class ResidualEncoder(Module):
    """Stem + four stages; exposes per-stage feature maps for decoder skips."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        c = config.stem_channels
        self.stem1 = ConvBN(3, c, 3, rng=rng, stride=2, relu=True)
        self.stem2 = ConvBN(c, c, 3, rng=rng, relu=True)
        self.stem3 = ConvBN(c, c, 3, rng=rng, relu=True)
        chans = config.stage_channels
        strides = (1, 2, 2, 1)
        dilations = (1, 1, 1, config.final_stage_dilation)
        prev = c
        self.stages = []
        for i in range(4):
            stage = Stage(prev, chans[i], config.blocks_per_stage[i],
                          strides[i], dilations[i], rng)
            self.add_module(f"stage{i + 1}", stage)
            self.stages.append(stage)
            prev = chans[i]

    def stem(self, tape: Tape | None, image: Tensor) -> Tensor:
        x = self.stem3(tape, self.stem2(tape, self.stem1(tape, image)))
        return ops.pool2d(x, "max", 3, 2, padding=1, tape=tape)

    def forward(self, tape: Tape | None, image: Tensor) -> StageFeatures:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"backbone: expected [N,3,H,W] image, got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % 16 or w % 16:
            raise ShapeError(f"backbone: input extent {h}x{w} not divisible by 16; "
                             "crop or pad upstream first")
        x = self.stem(tape, image)
        feats = []
        for stage in self.stages:
            x = stage(tape, x)
            feats.append(x)
        return StageFeatures(*feats)


def build_backbone(config: BackboneConfig, rng_seed: int) -> ResidualEncoder:
    """Deterministically initialized encoder; same seed, bit-equal weights."""
    return ResidualEncoder(config, np.random.default_rng(rng_seed))
