"""Global-attention upsample decoder block and the full network assembly:
encoder -> attention center block -> decoder chain over stage skips ->
1x1 classifier -> full-resolution logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import BackboneConfig, ConfigError, ResidualEncoder
from .fpa import ChannelGateAttention, FpaConfig, PyramidAttention
from .layers import Conv2d, ConvBN, Module
from .tensor import Tensor, Tape, ShapeError, add, mul, relu


@dataclass(frozen=True)
class GauConfig:
    low_channels: int
    high_channels: int
    out_channels: int
    use_global_context: bool = True
    reduce_kernel: int = 3

    def validate(self) -> "GauConfig":
        if min(self.low_channels, self.high_channels, self.out_channels) < 1:
            raise ConfigError(f"gau channels must be positive: {self}")
        if self.reduce_kernel not in (1, 3):
            raise ConfigError(f"gau reduce_kernel must be 1 or 3, got {self.reduce_kernel}")
        return self


class GlobalAttentionUpsample(Module):
    """Gate channel-reduced low-level skip features with a global context
    vector pooled from the high-level path, then add the upsampled
    high-level features.

    With use_global_context=False the block degrades to a plain
    skip-add decoder (no context sub-path parameters at all). The context
    batch norm runs over [N, C, 1, 1], so training needs batch size >= 2.
    """

    def __init__(self, config: GauConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.reduce = ConvBN(config.low_channels, config.out_channels,
                             config.reduce_kernel, rng=rng)
        if config.high_channels != config.out_channels:
            self.proj = ConvBN(config.high_channels, config.out_channels, 1, rng=rng)
        else:
            self.proj = None
        if config.use_global_context:
            self.ctx = ConvBN(config.high_channels, config.out_channels, 1, rng=rng,
                              relu=True)
        else:
            self.ctx = None

    def forward(self, tape: Tape | None, low: Tensor, high: Tensor, *,
                ctx_override: float | None = None,
                trace: dict | None = None) -> Tensor:
        hl, wl = low.shape[2], low.shape[3]
        hh, wh = high.shape[2], high.shape[3]
        if hl < hh or wl < wh:
            raise ShapeError(f"gau: low extent {hl}x{wl} smaller than high {hh}x{wh}")
        if hl % hh or wl % wh:
            raise ShapeError(f"gau: low extent {hl}x{wl} not divisible by high {hh}x{wh}")

        low_r = self.reduce(tape, low)
        hi = self.proj(tape, high) if self.proj is not None else high
        hi_up = ops.bilinear_upsample(hi, hl, wl, tape=tape)
        if self.ctx is None:
            return add(hi_up, low_r, tape)

        ctx = self.ctx(tape, ops.global_avg_pool(high, tape=tape))
        if ctx_override is not None:
            ctx = Tensor(np.full(ctx.shape, float(ctx_override)))
        if trace is not None:
            trace["ctx"] = ctx
        gated = mul(low_r, ctx, tape)
        return add(hi_up, gated, tape)


def gau_forward(graph: GlobalAttentionUpsample, tape: Tape | None, low: Tensor,
                high: Tensor, **kwargs) -> Tensor:
    return graph.forward(tape, low, high, **kwargs)


def build_gau(config: GauConfig, rng_seed: int) -> GlobalAttentionUpsample:
    return GlobalAttentionUpsample(config, np.random.default_rng(rng_seed))


@dataclass(frozen=True)
class PanConfig:
    backbone: BackboneConfig
    fpa: FpaConfig | None
    gau_chain: tuple[GauConfig, ...]
    num_classes: int
    final_upsample_factor: int

    @property
    def center_out_channels(self) -> int:
        deep = self.backbone.stage_channels[3]
        if self.fpa is None:
            return deep
        return deep if self.fpa.variant == "se" else self.fpa.out_channels

    def validate(self) -> "PanConfig":
        self.backbone.validate()
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        deep = self.backbone.stage_channels[3]
        if self.fpa is not None:
            self.fpa.validate()
            if self.fpa.in_channels != deep:
                raise ConfigError(f"junction backbone->center: stage-4 channels {deep} "
                                  f"!= fpa.in_channels {self.fpa.in_channels}")
        if len(self.gau_chain) > 3:
            raise ConfigError(f"gau_chain supports at most 3 skips, got {len(self.gau_chain)}")
        high = self.center_out_channels
        skips = self.backbone.stage_channels[2::-1]  # f3, f2, f1 channel counts
        for i, gau in enumerate(self.gau_chain):
            gau.validate()
            if gau.high_channels != high:
                raise ConfigError(f"junction gau{i + 1}.high: expected {high} channels, "
                                  f"config says {gau.high_channels}")
            if gau.low_channels != skips[i]:
                raise ConfigError(f"junction gau{i + 1}.low: stage skip has {skips[i]} "
                                  f"channels, config says {gau.low_channels}")
            high = gau.out_channels
        # f3/f4 share stride 16, so one GAU keeps stride 16; each further GAU halves it.
        expected = 16 >> max(0, len(self.gau_chain) - 1)
        if self.final_upsample_factor != expected:
            raise ConfigError(f"final_upsample_factor must be {expected} for "
                              f"{len(self.gau_chain)} decoder blocks, got "
                              f"{self.final_upsample_factor}")
        return self


def make_pan_config(num_classes: int, backbone: BackboneConfig | None = None, *,
                    center: str = "fpa", decoder: str = "gau", decoder_channels: int = 32,
                    fpa_kernels: tuple[int, int, int] = (7, 5, 3), fpa_pool: str = "ave",
                    fpa_global_pool: bool = True, gau_global_context: bool = True,
                    gau_reduce_kernel: int = 3) -> PanConfig:
    """Assemble a consistent PanConfig from the ablation-level knobs."""
    backbone = backbone or BackboneConfig()
    deep = backbone.stage_channels[3]
    if center == "none":
        fpa = None
    elif center == "se":
        fpa = FpaConfig(deep, deep, variant="se")
    elif center == "fpa":
        fpa = FpaConfig(deep, decoder_channels, kernel_sizes=fpa_kernels,
                        pool_mode=fpa_pool, use_global_pool_branch=fpa_global_pool)
    else:
        raise ConfigError(f"center must be none|fpa|se, got {center!r}")

    chain: list[GauConfig] = []
    if decoder == "gau":
        high = deep if fpa is None else (deep if fpa.variant == "se" else fpa.out_channels)
        for skip in backbone.stage_channels[2::-1]:
            chain.append(GauConfig(skip, high, decoder_channels,
                                   use_global_context=gau_global_context,
                                   reduce_kernel=gau_reduce_kernel))
            high = decoder_channels
    elif decoder != "none":
        raise ConfigError(f"decoder must be none|gau, got {decoder!r}")

    factor = 16 >> max(0, len(chain) - 1)
    return PanConfig(backbone, fpa, tuple(chain), num_classes, factor).validate()


class PyramidAttentionNetwork(Module):
    """Full segmentation network producing input-resolution logits.

    The classifier is a bias-carrying 1x1 conv initialized near zero so an
    untrained network starts from a near-uniform softmax.
    """

    def __init__(self, config: PanConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = ResidualEncoder(config.backbone, rng)
        if config.fpa is None:
            self.center = None
        elif config.fpa.variant == "se":
            self.center = ChannelGateAttention(config.fpa, rng)
        else:
            self.center = PyramidAttention(config.fpa, rng)
        self.gaus = []
        for i, gau_cfg in enumerate(config.gau_chain):
            gau = GlobalAttentionUpsample(gau_cfg, rng)
            self.add_module(f"gau{i + 1}", gau)
            self.gaus.append(gau)
        self.classifier = Conv2d(config.center_out_channels if not self.gaus
                                 else config.gau_chain[-1].out_channels,
                                 config.num_classes, 1, rng=rng, bias=True,
                                 weight_std=0.01)

    def forward(self, tape: Tape | None, image: Tensor) -> Tensor:
        h, w = image.shape[2], image.shape[3]
        feats = self.encoder(tape, image)
        x = feats.f4
        if self.center is not None:
            x = self.center(tape, x)
        for gau, skip in zip(self.gaus, (feats.f3, feats.f2, feats.f1)):
            x = gau(tape, skip, x)
        logits = self.classifier(tape, x)
        return ops.bilinear_upsample(logits, h, w, tape=tape)


def build_pan(config: PanConfig, rng_seed: int) -> PyramidAttentionNetwork:
    """Deterministically initialized network; same seed, bit-equal weights."""
    return PyramidAttentionNetwork(config, np.random.default_rng(rng_seed))


def pan_forward(graph: PyramidAttentionNetwork, tape: Tape | None, image: Tensor) -> Tensor:
    return graph.forward(tape, image)
