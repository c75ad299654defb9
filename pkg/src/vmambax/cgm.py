"""Context-gated cross-modal perception: asymmetric channel/spatial gating.

Both modality features are concatenated; a pooled channel descriptor drives a
per-modality bottleneck producing a channel gate, a 3x3 convolution over the
concatenation produces a per-modality spatial gate, and their broadcast
product modulates each input through the residual scaling y = x * (1 + g).
Gates are sigmoid outputs, so every element of g lies strictly in (0, 1) and
the block degenerates to the identity as the gate logits go to -inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm2d, Conv2d, Module
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    gelu,
    global_avg_pool,
    mul_broadcast,
    scalar_add,
    sigmoid,
)

MODALITIES = ("ct", "pet")


class _ChannelGate(Module):
    """Squeeze-style bottleneck on the pooled 2C descriptor, one per modality."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator,
                 eps: float, momentum: float):
        self.reduce = Conv2d(2 * channels, hidden, 1, rng=rng)
        self.bn = BatchNorm2d(hidden, eps=eps, momentum=momentum)
        self.expand = Conv2d(hidden, channels, 1, rng=rng)

    def forward(self, pooled: Tensor, training: bool) -> Tensor:
        return sigmoid(self.expand(gelu(self.bn(self.reduce(pooled), training))))


class CgmParams(Module):
    """Asymmetric per-modality gate parameters for one stage.

    ``hidden`` follows the squeeze-excitation convention max(C/ratio, 4).
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 bottleneck_ratio: int = 4, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1):
        self.channels = channels
        hidden = max(channels // bottleneck_ratio, 4)
        self.channel_ct = _ChannelGate(channels, hidden, rng, bn_eps, bn_momentum)
        self.channel_pet = _ChannelGate(channels, hidden, rng, bn_eps, bn_momentum)
        self.spatial_ct = Conv2d(2 * channels, 1, 3, padding=1, rng=rng)
        self.spatial_pet = Conv2d(2 * channels, 1, 3, padding=1, rng=rng)


@dataclass
class GatePair:
    """Gating tensors of one stage: channel and spatial factors plus products."""

    c_ct: Tensor
    c_pet: Tensor
    s_ct: Tensor
    s_pet: Tensor
    g_ct: Tensor
    g_pet: Tensor


def cgm_forward(x_ct: Tensor, x_pet: Tensor, params: CgmParams,
                training: bool) -> tuple[Tensor, Tensor, GatePair]:
    """Refine both modality features through asymmetric context gates.

    Returns the modulated features and the gates for inspection. Every output
    element y satisfies |x| <= |y| <= 2|x| with the sign of x preserved.
    """
    if x_ct.shape != x_pet.shape:
        axis = next(i for i, (a, b) in enumerate(zip(x_ct.shape, x_pet.shape)) if a != b)
        raise ShapeError(
            f"modality shapes differ at axis {axis}: {x_ct.shape} vs {x_pet.shape}")

    fused = concat_channels(x_ct, x_pet)
    pooled = global_avg_pool(fused)

    c_ct = params.channel_ct(pooled, training)
    c_pet = params.channel_pet(pooled, training)
    s_ct = sigmoid(params.spatial_ct(fused))
    s_pet = sigmoid(params.spatial_pet(fused))
    g_ct = mul_broadcast(c_ct, s_ct)
    g_pet = mul_broadcast(c_pet, s_pet)

    y_ct = mul_broadcast(x_ct, scalar_add(g_ct, 1.0))
    y_pet = mul_broadcast(x_pet, scalar_add(g_pet, 1.0))
    return y_ct, y_pet, GatePair(c_ct, c_pet, s_ct, s_pet, g_ct, g_pet)


@dataclass
class GateStats:
    """Min/mean/max summary of both modality gates."""

    ct: tuple[float, float, float]
    pet: tuple[float, float, float]

    @property
    def mean(self) -> float:
        return 0.5 * (self.ct[1] + self.pet[1])


def cgm_gate_stats(gates: GatePair) -> GateStats:
    """Pure reduction over the combined gates, for diagnostics output."""

    def mmm(t: Tensor):
        d = t.data
        return (float(d.min()), float(d.mean()), float(d.max()))

    return GateStats(ct=mmm(gates.g_ct), pet=mmm(gates.g_pet))
