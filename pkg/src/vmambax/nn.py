"""Thin layer wrappers over the tensor ops, with named-parameter traversal.

A ``Module`` is any object whose tensor-valued attributes are its learnable
parameters. Traversal follows attribute insertion order, so parameter names
are stable across runs, which the checkpoint format relies on.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    RunningStats,
    Tensor,
    batchnorm2d,
    conv2d,
    layernorm_channels,
    linear,
)


class Module:
    """Base class providing recursive named parameter/buffer iteration."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = prefix + name
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = prefix + name
            if isinstance(value, RunningStats):
                yield full + ".mean", value.mean
                yield full + ".var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Kaiming-style uniform initialization, bound 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        k = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.stride = stride
        self.padding = padding
        self.weight = uniform_init((out_channels, in_channels, k, k), in_channels * k * k, rng)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_init((in_features, out_features), in_features, rng)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = RunningStats.create(channels)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.stats, training,
                           momentum=self.momentum, eps=self.eps)


class LayerNormChannels(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return layernorm_channels(x, self.gamma, self.beta, eps=self.eps)
