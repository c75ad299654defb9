"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

All compute is 64-bit. Operations never mutate their inputs; the only
sanctioned in-place write is the optimizer's parameter update. Each forward
op records a backward closure on the output tensor; ``backward`` on a scalar
loss replays the closures in reverse topological order and frees the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as _special


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible; names the offending axis."""


class GraphError(RuntimeError):
    """Raised on autodiff contract violations (non-scalar loss, reused graph)."""


class Tensor:
    """Dense n-dimensional array with optional gradient tracking.

    Attributes:
        data: row-major float64 ndarray holding the values.
        requires_grad: whether gradients accumulate into ``grad``.
        grad: same-shape accumulator, allocated lazily on first backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Copy of the values with no graph attached."""
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward_fn):
    """Wrap an op result; the backward closure is kept only when needed."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad ancestor, then free the recorded graph.

    Each recorded node runs exactly once. A second call on the same loss
    is an error because the graph has been freed.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphError("backward graph already consumed; rerun the forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        node._backward = None
        node._parents = ()
    loss._consumed = True


def _reduce_to_shape(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcastable(a_shape, b_shape):
    ra, rb = len(a_shape), len(b_shape)
    for i in range(1, min(ra, rb) + 1):
        da, db = a_shape[-i], b_shape[-i]
        if da != db and da != 1 and db != 1:
            axis = max(ra, rb) - i
            raise ShapeError(
                f"shapes {a_shape} and {b_shape} not broadcastable at axis {axis}"
            )


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum with singleton broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(g, b.shape))

    return _from_op(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(-g, b.shape))

    return _from_op(out_data, (a, b), bwd)


def mul_broadcast(a, b) -> Tensor:
    """Elementwise product; gradients sum over broadcast axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(g * a.data, b.shape))

    return _from_op(out_data, (a, b), bwd)


mul = mul_broadcast


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _from_op(out_data, (a, b), bwd)


def scalar_add(a: Tensor, s: float) -> Tensor:
    out_data = a.data + s

    def bwd(g):
        a._accumulate(g)

    return _from_op(out_data, (a,), bwd)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def bwd(g):
        a._accumulate(g * s)

    return _from_op(out_data, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    return scalar_mul(a, -1.0)


# ---------------------------------------------------------------------------
# activations

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact error-function GELU, x * Phi(x)."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + _special.erf(a.data / _SQRT2))
    out_data = a.data * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(g * (cdf + a.data * pdf))

    return _from_op(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function; outputs strictly in (0, 1)."""
    a = _as_tensor(a)
    s = _special.expit(a.data)

    def bwd(g):
        a._accumulate(g * s * (1.0 - s))

    return _from_op(s, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow; derivative is the sigmoid."""
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def bwd(g):
        a._accumulate(g * _special.expit(a.data))

    return _from_op(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(in_shape))

    return _from_op(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def bwd(g):
        a._accumulate(np.transpose(g, inv))

    return _from_op(out_data, (a,), bwd)


def flip(a: Tensor, axis: int) -> Tensor:
    out_data = np.flip(a.data, axis=axis).copy()

    def bwd(g):
        a._accumulate(np.flip(g, axis=axis))

    return _from_op(out_data, (a,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"rank mismatch: {a.shape} vs {b.shape}")
    for ax in range(a.data.ndim):
        if ax == 1:
            continue
        if a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat operands differ at axis {ax}: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g[:, :c1])
        if b.requires_grad:
            b._accumulate(g[:, c1:])

    return _from_op(out_data, (a, b), bwd)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _from_op(out_data, (a,), bwd)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour spatial upsampling of an NCHW tensor."""
    n, c, h, w = a.shape
    out_data = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        a._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _from_op(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, returned as a scalar tensor."""
    out_data = np.asarray(a.data.sum())

    def bwd(g):
        a._accumulate(np.broadcast_to(g, a.shape).astype(np.float64))

    return _from_op(out_data, (a,), bwd)


def global_avg_pool(a: Tensor) -> Tensor:
    """Arithmetic mean over the spatial axes of an NCHW tensor."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got shape {a.shape}")
    n, c, h, w = a.shape
    out_data = a.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        a._accumulate(np.broadcast_to(g / (h * w), a.shape))

    return _from_op(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear maps


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ W (+ b), with W of shape [in, out]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear input axis {x.data.ndim - 1} has size {x.shape[-1]}, "
            f"weight expects {weight.shape[0]}"
        )
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _from_op(out_data, parents, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of an NCHW input with an [Cout,Cin,k,k] kernel."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    n, cin, h, w = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d input axis 1 has {cin} channels, weight expects {cin_w}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # pointwise fast path: a channel matmul
        out_data = np.einsum("nchw,oc->nohw", xd, wd[:, :, 0, 0], optimize=True)
        if bias is not None:
            out_data = out_data + bias.data[None, :, None, None]

        parents = (x, weight) if bias is None else (x, weight, bias)

        def bwd_pw(g):
            if x.requires_grad:
                x._accumulate(np.einsum("nohw,oc->nchw", g, wd[:, :, 0, 0], optimize=True))
            if weight.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)
                weight._accumulate(gw[:, :, None, None])
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))

        return _from_op(out_data, parents, bwd_pw)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.empty((kh, kw, n, cin, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            windows[i, j] = xp[:, :, i:i + (ho - 1) * stride + 1:stride,
                               j:j + (wo - 1) * stride + 1:stride]
    out_data = np.einsum("ijnchw,ocij->nohw", windows, wd, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("nohw,ijnchw->ocij", g, windows, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                        j:j + (wo - 1) * stride + 1:stride] += np.einsum(
                            "nohw,oc->nchw", g, wd[:, :, i, j], optimize=True)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _from_op(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    num_batches: int = 0

    @staticmethod
    def create(channels: int) -> "RunningStats":
        return RunningStats(np.zeros(channels), np.ones(channels))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel batch normalization of an NCHW tensor.

    Training mode normalizes by batch statistics and updates ``state`` with
    the given momentum; eval mode applies the running statistics. Epsilon is
    added inside the square root.
    """
    xd = x.data
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine params must have shape ({c},) for axis 1")
    m = n * h * w

    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * unbiased
        state.num_batches += 1

        def bwd_train(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gg = g * gamma.data[None, :, None, None]
                mean_g = gg.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gg * xhat).mean(axis=(0, 2, 3), keepdims=True)
                x._accumulate(inv_std[None, :, None, None] * (gg - mean_g - xhat * mean_gx))

        out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        return _from_op(out_data, (x, gamma, beta), bwd_train)

    inv_std = 1.0 / np.sqrt(state.var + eps)
    xhat = (xd - state.mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd_eval(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(g * (gamma.data * inv_std)[None, :, None, None])

    return _from_op(out_data, (x, gamma, beta), bwd_eval)


def layernorm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position normalization across the channel axis of an NCHW tensor."""
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm affine params must have shape ({c},) for axis 1")
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gg = g * gamma.data[None, :, None, None]
            mean_g = gg.mean(axis=1, keepdims=True)
            mean_gx = (gg * xhat).mean(axis=1, keepdims=True)
            x._accumulate(inv_std * (gg - mean_g - xhat * mean_gx))

    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    return _from_op(out_data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# classification head


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis; rows sum to one."""
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        x._accumulate(s * (g - dot))

    return _from_op(s, (x,), bwd)


def cross_entropy_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy between NKHW logits and NHW class labels."""
    ld = logits.data
    n, k, h, w = ld.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(
            f"target shape {target.shape} does not match logits spatial shape {(n, h, w)}"
        )
    tidx = target.astype(np.int64)
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    picked = np.take_along_axis(ld, tidx[:, None], axis=1)[:, 0]
    npix = n * h * w
    out_data = np.asarray((lse - picked).sum() / npix)

    def bwd(g):
        e = np.exp(ld - m)
        soft = e / e.sum(axis=1, keepdims=True)
        onehot_sub = soft
        np.put_along_axis(onehot_sub, tidx[:, None],
                          np.take_along_axis(soft, tidx[:, None], axis=1) - 1.0, axis=1)
        logits._accumulate(g * onehot_sub / npix)

    return _from_op(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_check(loss_fn, params, n_samples: int = 200,
                            step_scale: float = 1e-3, rng=None):
    """Compare autodiff gradients of a scalar loss against central differences.

    ``loss_fn`` must rebuild the forward graph on every call. Sample
    coordinates are spread over all parameter tensors (at least one per
    tensor). The step is ``step_scale * (|theta| + 1)`` per coordinate.

    Returns a dict with ``max_rel_err``, ``n_samples``, and the worst entry.
    """
    rng = rng or np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    total = sum(p.size for p in params)
    counts = [max(1, round(n_samples * p.size / total)) for p in params]

    max_rel = 0.0
    worst = None
    checked = 0
    for p, g_ad, cnt in zip(params, grads, counts):
        idxs = rng.choice(p.size, size=min(cnt, p.size), replace=False)
        flat = p.data.reshape(-1)
        gflat = g_ad.reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            h = step_scale * (abs(orig) + 1.0)
            flat[idx] = orig + h
            lp = float(loss_fn().data)
            flat[idx] = orig - h
            lm = float(loss_fn().data)
            flat[idx] = orig
            g_fd = (lp - lm) / (2.0 * h)
            rel = abs(gflat[idx] - g_fd) / max(abs(gflat[idx]), abs(g_fd), 1e-8)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = {"coord": int(idx), "autodiff": float(gflat[idx]),
                         "finite_diff": float(g_fd), "rel_err": float(rel)}
    return {"max_rel_err": max_rel, "n_samples": checked, "worst": worst}
