"""Full segmentation model: shared-weight dual encoder, per-stage gating and
fusion, state-space decoder, classifier, plus parameter and MAC counters.

The two modality branches run through one set of encoder weights (stem, VSS
stages, patch merges are single objects called twice), so encoder parameters
exist once in storage and are counted once. Gating and fusion parameters are
stage-specific and never shared.

The fusion block ("DCIM-lite") and the decoder up-blocks ("CVSS-lite",
upsample + skip concat + 1x1 projection + VSS block) are deliberately
simplified stand-ins for the cited interaction/decoder designs; only the
context-gating module is reproduced in full.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cgm import CgmParams, GatePair, cgm_forward
from .nn import Conv2d, Module
from .scan import Downsample, VssBlock
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    gelu,
    global_avg_pool,
    mul_broadcast,
    scalar_add,
    scalar_mul,
    sigmoid,
    upsample_nearest,
)


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale setup."""

    in_channels: int = 1
    stage_channels: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (1, 1, 1, 1)
    state_dim: int = 8
    cgm_bottleneck_ratio: int = 4
    num_classes: int = 2
    input_size: int = 64
    # conventional normalization constants, not architecture-derived
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("stage_channels and stage_depths must both have length 4")
        if self.input_size % 16 != 0:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        if min(self.stage_channels) < 1 or min(self.stage_depths) < 1:
            raise ValueError("stage widths and depths must be positive")


class EncoderStage(Module):
    def __init__(self, channels: int, depth: int, state_dim: int, rng):
        self.blocks = [VssBlock(channels, state_dim, rng) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class DcimLite(Module):
    """Channel-gated mix of the two refined branches, then a shared projection.

    The gate comes from a 1x1 map of the pooled concatenation; the mix is
    convex per channel, so forcing the gate to 1 reproduces the projected CT
    path and identical inputs pass through as a plain projection.
    """

    def __init__(self, channels: int, rng):
        self.channels = channels
        self.gate = Conv2d(2 * channels, channels, 1, rng=rng)
        self.proj = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, y_ct: Tensor, y_pet: Tensor) -> Tensor:
        pooled = global_avg_pool(concat_channels(y_ct, y_pet))
        m = sigmoid(self.gate(pooled))
        inv = scalar_add(scalar_mul(m, -1.0), 1.0)
        mixed = add(mul_broadcast(m, y_ct), mul_broadcast(inv, y_pet))
        return self.proj(mixed)


class UpBlock(Module):
    """Decoder step: upsample, concat the skip, project, refine with a scan block."""

    def __init__(self, in_channels: int, skip_channels: int, state_dim: int, rng):
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.proj = Conv2d(in_channels + skip_channels, skip_channels, 1, rng=rng)
        self.block = VssBlock(skip_channels, state_dim, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = upsample_nearest(x, 2)
        return self.block(self.proj(concat_channels(up, skip)))


class VMambaX(Module):
    """Dual-branch state-space segmentation network for paired CT/PET slices."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.config = config
        ch = config.stage_channels

        # shared encoder storage: one stem, one stage list, one merge list
        self.stem = Conv2d(config.in_channels, ch[0], 3, stride=2, padding=1, rng=rng)
        self.stages = [EncoderStage(ch[i], config.stage_depths[i], config.state_dim, rng)
                       for i in range(4)]
        self.merges = [Downsample(ch[i], ch[i + 1], rng=rng) for i in range(3)]

        self.cgms = [CgmParams(ch[i], rng, config.cgm_bottleneck_ratio,
                               config.bn_eps, config.bn_momentum) for i in range(4)]
        self.fusers = [DcimLite(ch[i], rng) for i in range(4)]

        self.decoder = [UpBlock(ch[i + 1], ch[i], config.state_dim, rng)
                        for i in reversed(range(3))]
        self.head = Conv2d(ch[0], ch[0], 3, padding=1, rng=rng)
        self.classifier = Conv2d(ch[0], config.num_classes, 1, rng=rng)

    # both branch handles reference the same storage by construction
    @property
    def encoder_ct(self):
        return self.stages

    @property
    def encoder_pet(self):
        return self.stages

    def forward(self, ct: Tensor, pet: Tensor, training: bool = False,
                return_gates: bool = False):
        size = self.config.input_size
        for name, t in (("ct", ct), ("pet", pet)):
            if t.data.ndim != 4 or t.shape[1] != self.config.in_channels:
                raise ShapeError(f"{name} input must be [N,{self.config.in_channels},H,W], "
                                 f"got {t.shape}")
            if t.shape[2] != size:
                raise ShapeError(f"{name} axis 2 must be {size}, got {t.shape[2]}")
            if t.shape[3] != size:
                raise ShapeError(f"{name} axis 3 must be {size}, got {t.shape[3]}")

        x_ct = self.stem(ct)
        x_pet = self.stem(pet)

        fused = []
        gates: list[GatePair] = []
        for i in range(4):
            if i > 0:
                x_ct = self.merges[i - 1](x_ct)
                x_pet = self.merges[i - 1](x_pet)
            x_ct = self.stages[i](x_ct)
            x_pet = self.stages[i](x_pet)
            y_ct, y_pet, pair = cgm_forward(x_ct, x_pet, self.cgms[i], training)
            fused.append(self.fusers[i](y_ct, y_pet))
            gates.append(pair)
            x_ct, x_pet = y_ct, y_pet

        d = fused[3]
        for k, up in enumerate(self.decoder):
            d = up(d, fused[2 - k])
        d = gelu(self.head(upsample_nearest(d, 2)))
        logits = self.classifier(d)
        return (logits, gates) if return_gates else logits


# ---------------------------------------------------------------------------
# counters


def named_unique_parameters(model: Module):
    """(name, tensor) pairs with shared storage reported once."""
    seen = set()
    for name, t in model.named_parameters():
        if id(t) not in seen:
            seen.add(id(t))
            yield name, t


def count_params(model: Module) -> int:
    """Exact number of scalar parameters; shared encoder weights count once."""
    return sum(t.size for _, t in named_unique_parameters(model))


def encoder_param_subtotal(model: VMambaX) -> int:
    """Parameters of the branch-shared storage (stem, stages, patch merges)."""
    total = sum(t.size for _, t in model.stem.named_parameters())
    for stage in model.stages:
        total += sum(t.size for _, t in stage.named_parameters())
    for merge in model.merges:
        total += sum(t.size for _, t in merge.named_parameters())
    return total


def _conv_macs(cin, cout, k, h, w):
    return cout * h * w * cin * k * k


def _scan_macs(length, channels, state_dim):
    # decay discretization LCS, increment build 2*LCS, recurrence LCS,
    # output contraction LCS, skip LC
    return 5 * length * channels * state_dim + length * channels


def _vss_macs(length, channels, state_dim):
    proj = length * channels * channels + 2 * length * channels * state_dim
    per_dir = proj + _scan_macs(length, channels, state_dim)
    gate_out = 2 * length * channels * channels
    return 4 * per_dir + gate_out


def count_flops(model: VMambaX, input_size: int | None = None, batch: int = 1) -> int:
    """Multiply-accumulate count for one forward pass, reported as FLOPs.

    Counting rules (1 MAC = 2 FLOPs): convolutions and linear maps count
    Cout*H*W*Cin*k*k per sample, bias adds excluded; a selective scan counts
    5*L*C*S + L*C (discretization, increment, recurrence, output contraction,
    skip); normalizations, activations, and elementwise gate products are
    free. Encoder work is counted twice, once per modality branch.
    """
    cfg = model.config
    size = input_size if input_size is not None else cfg.input_size
    ch = cfg.stage_channels
    macs = 0

    s = size // 2
    macs += 2 * _conv_macs(cfg.in_channels, ch[0], 3, s, s)  # stem, both branches
    for i in range(4):
        if i > 0:
            prev = s
            s = s // 2
            macs += 2 * _conv_macs(4 * ch[i - 1], ch[i], 1, s, s)  # patch-merge proj
        length = s * s
        macs += 2 * cfg.stage_depths[i] * _vss_macs(length, ch[i], cfg.state_dim)
        hidden = max(ch[i] // cfg.cgm_bottleneck_ratio, 4)
        macs += 2 * (2 * ch[i] * hidden + hidden * ch[i])       # channel bottlenecks
        macs += 2 * _conv_macs(2 * ch[i], 1, 3, s, s)           # spatial gates
        macs += 2 * ch[i] * ch[i]                               # fuse gate (pooled)
        macs += _conv_macs(ch[i], ch[i], 1, s, s)               # fuse projection
    for k in range(3):
        cin, cout = ch[3 - k], ch[2 - k]
        s = s * 2
        length = s * s
        macs += _conv_macs(cin + cout, cout, 1, s, s)
        macs += _vss_macs(length, cout, cfg.state_dim)
    s = s * 2
    macs += _conv_macs(ch[0], ch[0], 3, s, s)
    macs += _conv_macs(ch[0], cfg.num_classes, 1, s, s)
    return 2 * macs * batch
