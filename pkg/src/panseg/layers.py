"""Composable layer graph with named parameters and buffers.

Modules own Parameters (leaf tensors with requires_grad=True) and buffers
(plain arrays such as batch-norm running statistics). Construction is
deterministic: every module draws its initial weights from the generator
handed to it, in registration order, so a fixed seed reproduces bit-equal
parameters.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, Tape, ShapeError


class Parameter(Tensor):
    """Leaf tensor registered on a module; always participates in autodiff."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: tracks child modules, parameters and buffers by name."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, tape, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, tape, *args, **kwargs):
        return self.forward(tape, *args, **kwargs)


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He initialization, fan-in mode, for relu networks."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    """Same-padding convolution layer (padding = dilation*(k-1)//2).

    Convs followed by batch norm carry no bias; standalone convs (the
    classifier, the channel-gate) do.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, *,
                 rng: np.random.Generator, stride: int = 1, dilation: int = 1,
                 bias: bool = False, weight_std: float | None = None):
        super().__init__()
        if kernel % 2 == 0:
            raise ShapeError(f"Conv2d: kernel must be odd for same padding, got {kernel}")
        padding = dilation * (kernel - 1) // 2
        self.spec = ops.ConvSpec(in_channels, out_channels, kernel, kernel,
                                 stride=stride, padding=padding, dilation=dilation,
                                 has_bias=bias)
        fan_in = in_channels * kernel * kernel
        if weight_std is None:
            w = kaiming_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        else:
            w = rng.normal(0.0, weight_std, size=(out_channels, in_channels, kernel, kernel))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, tape: Tape | None, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec, tape)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, tape: Tape | None, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean,
                                self.running_var, self.training, self.momentum,
                                self.eps, tape)


class ConvBN(Module):
    """conv -> batch norm (-> relu), the building unit of every block here."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, *,
                 rng: np.random.Generator, stride: int = 1, dilation: int = 1,
                 relu: bool = False):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng=rng,
                           stride=stride, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(out_channels)
        self.with_relu = relu

    def forward(self, tape: Tape | None, x: Tensor) -> Tensor:
        from .tensor import relu as relu_op
        out = self.bn(tape, self.conv(tape, x))
        return relu_op(out, tape) if self.with_relu else out
