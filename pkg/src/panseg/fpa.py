"""Feature pyramid attention center block, plus the channel-gate ablation
variant.

The pyramid path pools the input down three times (kernel 2, stride 2),
convolves each level with its own kernel size (largest kernel on the
shallowest, largest map), then merges bottom-up with additions and bilinear
upsampling back to each level's pre-pool extent. The merged map multiplies
a 1x1-conv main branch pixel-wise; an optional global-pooling branch adds a
per-channel context vector on top. No non-linearity is applied to the
attention map before the multiplication, so attention values are unbounded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import ConfigError
from .layers import Conv2d, ConvBN, Module
from .tensor import Tensor, Tape, ShapeError, add, mul, relu, sigmoid


class VariantError(ValueError):
    """Forward entry point does not match the built variant."""


@dataclass(frozen=True)
class FpaConfig:
    in_channels: int
    out_channels: int
    kernel_sizes: tuple[int, int, int] = (7, 5, 3)  # shallow -> deep
    pool_mode: str = "ave"
    use_global_pool_branch: bool = True
    variant: str = "pyramid"

    def validate(self) -> "FpaConfig":
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("fpa channels must be positive, got "
                              f"in={self.in_channels} out={self.out_channels}")
        if self.variant not in ("pyramid", "se"):
            raise ConfigError(f"fpa variant must be 'pyramid' or 'se', got {self.variant!r}")
        if self.variant == "pyramid":
            if len(self.kernel_sizes) != 3:
                raise ConfigError(f"kernel_sizes needs 3 entries, got {self.kernel_sizes}")
            if any(k % 2 == 0 for k in self.kernel_sizes):
                raise ConfigError(f"kernel_sizes must be odd, got {self.kernel_sizes}")
            if self.pool_mode not in ("max", "ave"):
                raise ConfigError(f"pool_mode must be 'max' or 'ave', got {self.pool_mode!r}")
        return self


class PyramidAttention(Module):
    """Three-level pooled pyramid gating a 1x1 main branch."""

    variant = "pyramid"

    def __init__(self, config: FpaConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        cin, cout = config.in_channels, config.out_channels
        self.main = ConvBN(cin, cout, 1, rng=rng)
        k1, k2, k3 = config.kernel_sizes
        self.down1 = ConvBN(cin, cout, k1, rng=rng)
        self.down2 = ConvBN(cout, cout, k2, rng=rng)
        self.down3 = ConvBN(cout, cout, k3, rng=rng)
        self.up1 = ConvBN(cout, cout, k1, rng=rng)
        self.up2 = ConvBN(cout, cout, k2, rng=rng)
        self.up3 = ConvBN(cout, cout, k3, rng=rng)
        if config.use_global_pool_branch:
            self.gp_conv = ConvBN(cin, cout, 1, rng=rng)
        else:
            self.gp_conv = None

    def forward(self, tape: Tape | None, x: Tensor, *,
                attention_override: float | None = None,
                trace: dict | None = None) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        if h < 8 or w < 8:
            raise ShapeError(f"pyramid attention needs input extent >= 8, got {h}x{w} "
                             "(three stride-2 downsamples must keep extent >= 1)")
        pool = self.config.pool_mode
        main = self.main(tape, x)

        p1 = self.down1(tape, ops.pool2d(x, pool, 2, 2, tape=tape))
        p2 = self.down2(tape, ops.pool2d(p1, pool, 2, 2, tape=tape))
        p3 = self.down3(tape, ops.pool2d(p2, pool, 2, 2, tape=tape))
        if trace is not None:
            trace["pyramid_shapes"] = [p1.shape, p2.shape, p3.shape]

        # Bottom-up merge; each level is upsampled to the extent it was
        # pooled from (a plain x2 on power-of-two maps).
        u3 = ops.bilinear_upsample(self.up3(tape, p3), p2.shape[2], p2.shape[3], tape=tape)
        u2 = ops.bilinear_upsample(self.up2(tape, add(p2, u3, tape)),
                                   p1.shape[2], p1.shape[3], tape=tape)
        attention = ops.bilinear_upsample(self.up1(tape, add(p1, u2, tape)), h, w, tape=tape)
        if attention_override is not None:
            attention = Tensor(np.full(attention.shape, float(attention_override)))
        if trace is not None:
            trace["attention"] = attention

        out = mul(main, attention, tape)
        if self.gp_conv is not None:
            context = self.gp_conv(tape, ops.global_avg_pool(x, tape=tape))
            out = add(out, context, tape)
        return out


class ChannelGateAttention(Module):
    """Channel-only gate: global pool -> bottleneck -> sigmoid -> multiply.

    Ablation substitute for the pyramid; output keeps the input's channel
    count. Bottleneck reduction is 4 (16 would underflow at desk widths).
    """

    variant = "se"
    reduction = 4

    def __init__(self, config: FpaConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        cin = config.in_channels
        hidden = max(1, cin // self.reduction)
        self.fc1 = Conv2d(cin, hidden, 1, rng=rng, bias=True)
        self.fc2 = Conv2d(hidden, cin, 1, rng=rng, bias=True)

    def forward(self, tape: Tape | None, x: Tensor, *,
                gate_override: float | None = None,
                trace: dict | None = None) -> Tensor:
        squeezed = ops.global_avg_pool(x, tape=tape)
        gate = sigmoid(self.fc2(tape, relu(self.fc1(tape, squeezed), tape)), tape)
        if gate_override is not None:
            gate = Tensor(np.full(gate.shape, float(gate_override)))
        if trace is not None:
            trace["gate"] = gate
        return mul(x, gate, tape)

    @property
    def out_channels(self) -> int:
        return self.config.in_channels


def build_fpa(config: FpaConfig, rng_seed: int) -> Module:
    """Build the configured center block with deterministic initialization."""
    rng = np.random.default_rng(rng_seed)
    if config.variant == "se":
        return ChannelGateAttention(config, rng)
    return PyramidAttention(config, rng)


def fpa_forward(graph: Module, tape: Tape | None, x: Tensor, **kwargs) -> Tensor:
    if getattr(graph, "variant", None) != "pyramid":
        raise VariantError("fpa_forward requires the pyramid variant")
    return graph.forward(tape, x, **kwargs)


def se_forward(graph: Module, tape: Tape | None, x: Tensor, **kwargs) -> Tensor:
    if getattr(graph, "variant", None) != "se":
        raise VariantError("se_forward requires the se variant")
    return graph.forward(tape, x, **kwargs)
