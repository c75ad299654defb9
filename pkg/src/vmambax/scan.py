"""Selective state-space scan and the visual state-space block built on it.

The scan evaluates the input-dependent linear recurrence

    h_t = abar_t * h_{t-1} + delta_t * B_t * u_t,    h_0 = 0
    y_t = C_t . h_t + D * u_t

with abar_t = exp(-delta_t * exp(A_log)), so every discretized decay lies in
(0, 1). Two execution paths share the contract: a plain sequential loop (the
correctness reference) and a work-efficient Blelloch prefix scan over the
associative decay/increment algebra (the default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, uniform_init
from .tensor import ShapeError, Tensor, _from_op, softplus


@dataclass(frozen=True)
class ScanElement:
    """One step of the recurrence viewed as the affine map h -> decay*h + increment.

    Composition applies ``self`` first, then ``other``; it is associative,
    which is what licenses the parallel prefix evaluation.
    """

    decay: object
    increment: object

    def compose(self, other: "ScanElement") -> "ScanElement":
        return ScanElement(self.decay * other.decay,
                           self.increment * other.decay + other.increment)

    def apply(self, state):
        return self.decay * state + self.increment


def _scan_sequential(abar: np.ndarray, incr: np.ndarray) -> np.ndarray:
    """Reference evaluation of the recurrence along axis 1."""
    n, length = abar.shape[:2]
    h = np.zeros((n,) + abar.shape[2:], dtype=np.float64)
    out = np.empty_like(abar)
    for t in range(length):
        h = abar[:, t] * h + incr[:, t]
        out[:, t] = h
    return out


def _scan_blelloch(abar: np.ndarray, incr: np.ndarray) -> np.ndarray:
    """Work-efficient parallel prefix evaluation of the same recurrence.

    Pads the time axis to a power of two with identity elements (decay 1,
    increment 0), runs the up/down sweeps on vectorized strided slices, and
    converts the exclusive prefixes to inclusive states with one final
    combine. Inputs are copied, never mutated.
    """
    length = abar.shape[1]
    padded = 1 << (length - 1).bit_length() if length > 1 else 1

    shape = list(abar.shape)
    shape[1] = padded
    a = np.ones(shape, dtype=np.float64)
    b = np.zeros(shape, dtype=np.float64)
    a[:, :length] = abar
    b[:, :length] = incr

    # upsweep: parents accumulate compose(left, right)
    step = 1
    while step < padded:
        lo = slice(step - 1, padded, 2 * step)
        hi = slice(2 * step - 1, padded, 2 * step)
        b[:, hi] = b[:, lo] * a[:, hi] + b[:, hi]
        a[:, hi] = a[:, lo] * a[:, hi]
        step *= 2

    # downsweep: root becomes identity, children receive exclusive prefixes
    a[:, -1] = 1.0
    b[:, -1] = 0.0
    step = padded // 2
    while step >= 1:
        lo = slice(step - 1, padded, 2 * step)
        hi = slice(2 * step - 1, padded, 2 * step)
        ta = a[:, lo].copy()
        tb = b[:, lo].copy()
        a[:, lo] = a[:, hi]
        b[:, lo] = b[:, hi]
        b[:, hi] = b[:, lo] * ta + tb
        a[:, hi] = a[:, lo] * ta
        step //= 2

    # inclusive state: h_t = compose(exclusive_t, element_t).increment
    return b[:, :length] * abar + incr


class SsmParams(Module):
    """Per-block parameters of the selective scan.

    A_log holds the log of the negated continuous-time state decay, so
    exp(A_log) > 0 and every discretized decay exp(-delta*exp(A_log)) stays
    inside (0, 1). The delta/B/C projections produce per-token values from
    the input sequence; D is the per-channel skip coefficient.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        self.channels = channels
        self.state_dim = state_dim
        self.a_log = Tensor(np.log(np.broadcast_to(
            np.arange(1, state_dim + 1, dtype=np.float64), (channels, state_dim)).copy()),
            requires_grad=True)
        self.skip = Tensor(np.ones(channels), requires_grad=True)
        self.delta_proj = Linear(channels, channels, rng=rng)
        # bias chosen so softplus(bias) lands in [dt_min, dt_max]
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        self.delta_proj.bias.data[:] = dt + np.log(-np.expm1(-dt))
        self.b_proj = Linear(channels, state_dim, bias=False, rng=rng)
        self.c_proj = Linear(channels, state_dim, bias=False, rng=rng)


def _scan_core(u: Tensor, delta: Tensor, b_seq: Tensor, c_seq: Tensor,
               a_log: Tensor, skip: Tensor, parallel: bool) -> Tensor:
    """Fused recurrence node: forward in numpy, analytic reverse-mode adjoint.

    The adjoint of the state sequence satisfies its own linear recurrence in
    reverse time, so the backward pass reuses the same scan primitive with
    flipped time and decays shifted by one step.
    """
    ud, dd = u.data, delta.data
    bd, cd = b_seq.data, c_seq.data
    expa = np.exp(a_log.data)                         # [C,S]
    abar = np.exp(-(dd[..., None] * expa))            # [N,L,C,S]
    incr = (dd * ud)[..., None] * bd[:, :, None, :]   # [N,L,C,S]
    scan = _scan_blelloch if parallel else _scan_sequential
    h = scan(abar, incr)
    y = np.einsum("nlcs,nls->nlc", h, cd, optimize=True) + skip.data * ud

    def bwd(g):
        if c_seq.requires_grad:
            c_seq._accumulate(np.einsum("nlc,nlcs->nls", g, h, optimize=True))
        if skip.requires_grad:
            skip._accumulate(np.einsum("nlc,nlc->c", g, ud, optimize=True))

        dh = g[..., None] * cd[:, :, None, :]
        # reverse-time scan: adj_t = dh_t + abar_{t+1} * adj_{t+1}
        dh_r = dh[:, ::-1]
        a_r = abar[:, ::-1]
        a_used = np.concatenate([np.ones_like(a_r[:, :1]), a_r[:, :-1]], axis=1)
        adj = scan(a_used, dh_r)[:, ::-1]

        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        d_abar = adj * h_prev
        d_da = -abar * d_abar

        if a_log.requires_grad:
            d_a = dd[..., None] * expa
            a_log._accumulate(np.einsum("nlcs,nlcs->cs", d_da, d_a, optimize=True))

        incr_b = (adj * bd[:, :, None, :]).sum(axis=-1)    # [N,L,C]
        if delta.requires_grad:
            ddelta = (d_da * expa).sum(axis=-1) + incr_b * ud
            delta._accumulate(ddelta)
        if b_seq.requires_grad:
            b_seq._accumulate(np.einsum("nlcs,nlc->nls", adj, dd * ud, optimize=True))
        if u.requires_grad:
            u._accumulate(incr_b * dd + g * skip.data)

    return _from_op(y, (u, delta, b_seq, c_seq, a_log, skip), bwd)


def _selective_scan(u: Tensor, params: SsmParams, parallel: bool) -> Tensor:
    squeeze = u.data.ndim == 2
    if u.data.ndim not in (2, 3):
        raise ShapeError(f"selective scan expects [L,C] or [N,L,C], got {u.shape}")
    u3 = u if not squeeze else _reshape3(u)
    if u3.shape[1] == 0:
        raise ShapeError("selective scan requires a nonempty sequence (axis 1 is 0)")
    if u3.shape[2] != params.channels:
        raise ShapeError(
            f"sequence has {u3.shape[2]} channels at axis 2, params expect {params.channels}")
    delta = softplus(params.delta_proj(u3))
    b_seq = params.b_proj(u3)
    c_seq = params.c_proj(u3)
    y = _scan_core(u3, delta, b_seq, c_seq, params.a_log, params.skip, parallel)
    return _squeeze3(y) if squeeze else y


def _reshape3(u: Tensor) -> Tensor:
    from .tensor import reshape
    return reshape(u, (1,) + u.shape)


def _squeeze3(y: Tensor) -> Tensor:
    from .tensor import reshape
    return reshape(y, y.shape[1:])


def selective_scan_seq(u: Tensor, params: SsmParams) -> Tensor:
    """Sequential-loop evaluation; the correctness reference."""
    return _selective_scan(u, params, parallel=False)


def selective_scan_par(u: Tensor, params: SsmParams) -> Tensor:
    """Parallel prefix-scan evaluation; the default execution path."""
    return _selective_scan(u, params, parallel=True)


# ---------------------------------------------------------------------------
# visual state-space block


class VssBlock(Module):
    """Residual 2D block that scans the image along four flattening orders.

    The normalized input is flattened row-major, row-major reversed,
    column-major, and column-major reversed; each sequence runs through the
    same selective scan, the four spatial outputs are averaged (the merge is
    path-symmetric), gated pointwise, projected, and added to the input.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator):
        from .nn import Conv2d, LayerNormChannels
        self.channels = channels
        self.norm = LayerNormChannels(channels)
        self.ssm = SsmParams(channels, state_dim, rng)
        self.gate_conv = Conv2d(channels, channels, 1, rng=rng)
        self.out_conv = Conv2d(channels, channels, 1, rng=rng)

    def scan_path_outputs(self, x: Tensor) -> list[Tensor]:
        """The four per-direction scan outputs mapped back to NCHW, pre-merge."""
        return self._paths(self.norm(x))

    def _paths(self, xn: Tensor) -> list[Tensor]:
        from .tensor import flip, reshape, transpose
        n, c, h, w = xn.shape
        length = h * w

        row = transpose(reshape(xn, (n, c, length)), (0, 2, 1))
        col = transpose(reshape(transpose(xn, (0, 1, 3, 2)), (n, c, length)), (0, 2, 1))

        outs = []
        for seq, reversed_, columnar in ((row, False, False), (row, True, False),
                                         (col, False, True), (col, True, True)):
            if reversed_:
                seq = flip(seq, axis=1)
            y = selective_scan_par(seq, self.ssm)
            if reversed_:
                y = flip(y, axis=1)
            y = transpose(y, (0, 2, 1))
            if columnar:
                y = transpose(reshape(y, (n, c, w, h)), (0, 1, 3, 2))
            else:
                y = reshape(y, (n, c, h, w))
            outs.append(y)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import add, mul_broadcast, scalar_mul, sigmoid
        xn = self.norm(x)
        outs = self._paths(xn)
        merged = scalar_mul(add(add(outs[0], outs[1]), add(outs[2], outs[3])), 0.25)
        gate = sigmoid(self.gate_conv(xn))
        return add(self.out_conv(mul_broadcast(merged, gate)), x)


class Downsample(Module):
    """2x2 patch merge (space-to-channel) followed by a linear projection.

    Merged channel order is block-offset major: output channel
    (2*di + dj)*C + c holds input channel c at spatial offset (di, dj).
    The projection maps 4*C to ``out_channels`` (2*C by default).
    """

    def __init__(self, in_channels: int, out_channels: int | None = None,
                 rng: np.random.Generator | None = None):
        from .nn import Conv2d
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels if out_channels is not None else 2 * in_channels
        self.proj = Conv2d(4 * in_channels, self.out_channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import reshape, transpose
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"downsample needs even spatial axes 2 and 3, got {h}x{w}")
        r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
        t = transpose(r, (0, 3, 5, 1, 2, 4))
        merged = reshape(t, (n, 4 * c, h // 2, w // 2))
        return self.proj(merged)
