"""Differentiable building blocks of the fusion pipeline.

Feature maps are [batch, channels, height, width] tensors. "Convolution"
is cross-correlation with zero padding (no kernel flip). The squeeze /
excite / scale trio implements channel attention: per-channel spatial
means, a two-layer bottleneck gate squashed by a sigmoid, and channel-wise
rescaling. Pooling is global (one value per channel) so the classifier
head operates directly on the pooled vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, make_node, matmul, relu, sigmoid, transpose
from .errors import ConfigError, DimensionError


@dataclass
class SEParams:
    """Bottleneck gate weights: w1 is [c/r x c], w2 is [c x c/r]."""

    w1: Tensor
    w2: Tensor
    reduction_ratio: int

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ConfigError("reduction ratio must be a positive integer")
        cr, c = self.w1.shape
        if c % self.reduction_ratio != 0 or cr != c // self.reduction_ratio:
            raise ConfigError(
                f"w1 shape {self.w1.shape} inconsistent with {c} channels at "
                f"reduction ratio {self.reduction_ratio}"
            )
        if self.w2.shape != (c, cr):
            raise ConfigError(f"w2 shape {self.w2.shape} must be ({c}, {cr})")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


@dataclass
class ClassifierParams:
    """Softmax head: weight is [num_classes x feature_dim], bias [num_classes]."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} must be ({self.weight.shape[0]},)"
            )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias for x [B x in], weight [out x in], bias [out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear: bias {bias.shape} incompatible with weight {weight.shape}"
        )

    def backward_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_node(x.data @ weight.data.T + bias.data, (x, weight, bias), backward_fn)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation of x [B,Cin,H,W] with kernels [Cout,Cin,kh,kw].

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1 (same for W);
    each output channel sums over all input channels.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and kernels, got {x.shape} and {kernels.shape}"
        )
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"conv2d: pad must be >= 0, got {pad}")
    batch, cin, height, width = x.shape
    cout, k_cin, kh, kw = kernels.shape
    if k_cin != cin:
        raise DimensionError(
            f"conv2d: kernels expect {k_cin} input channels, input has {cin}"
        )
    hp, wp = height + 2 * pad, width + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((batch, cout, h_out, w_out), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            window = xp[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride]
            out += np.einsum("bchw,oc->bohw", window, kernels.data[:, :, u, v])

    def backward_fn(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernels.data)
        for u in range(kh):
            for v in range(kw):
                window = xp[
                    :, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride
                ]
                dk[:, :, u, v] = np.einsum("bohw,bchw->oc", g, window)
                dxp[
                    :, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride
                ] += np.einsum("bohw,oc->bchw", g, kernels.data[:, :, u, v])
        dx = dxp[:, :, pad : pad + height, pad : pad + width] if pad else dxp
        return np.ascontiguousarray(dx), dk

    return make_node(out, (x, kernels), backward_fn)


def se_squeeze(x: Tensor) -> Tensor:
    """Per-channel spatial mean of a [B,c,H,W] map -> [B,c]."""
    if x.data.ndim != 4:
        raise DimensionError(f"se_squeeze: expected 4-d feature map, got {x.shape}")
    _, _, height, width = x.shape
    area = float(height * width)

    def backward_fn(g):
        spread = np.broadcast_to(g[:, :, None, None] / area, x.shape)
        return (np.ascontiguousarray(spread),)

    return make_node(x.data.mean(axis=(2, 3)), (x,), backward_fn)


def se_excite(z: Tensor, params: SEParams) -> Tensor:
    """Channel gates sigmoid(relu(z @ w1.T) @ w2.T); every output in (0,1)."""
    if z.data.ndim != 2 or z.shape[1] != params.channels:
        raise DimensionError(
            f"se_excite: input {z.shape} incompatible with {params.channels} channels"
        )
    hidden = relu(matmul(z, transpose(params.w1)))
    return sigmoid(matmul(hidden, transpose(params.w2)))


def se_scale(x: Tensor, s: Tensor) -> Tensor:
    """Rescale each channel of x [B,c,H,W] by its gate in s [B,c]."""
    if x.data.ndim != 4 or s.data.ndim != 2 or x.shape[:2] != s.shape:
        raise DimensionError(
            f"se_scale: map {x.shape} incompatible with gates {s.shape}"
        )

    def backward_fn(g):
        dx = g * s.data[:, :, None, None]
        ds = (g * x.data).sum(axis=(2, 3))
        return dx, ds

    return make_node(x.data * s.data[:, :, None, None], (x, s), backward_fn)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum of a [B,c,H,W] map -> [B,c].

    The gradient routes to exactly one element per channel: the first
    maximum in row-major order when there are ties.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"global_max_pool: expected 4-d feature map, got {x.shape}")
    batch, channels, height, width = x.shape
    flat = x.data.reshape(batch, channels, height * width)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward_fn(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[:, :, None], g[:, :, None], axis=2)
        return (dflat.reshape(x.shape),)

    return make_node(np.ascontiguousarray(out), (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax: expected 2-d logits, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - inner) * out,)

    return make_node(out, (x,), backward_fn)


def softmax_classify(x: Tensor, params: ClassifierParams) -> Tensor:
    """Class probabilities for pooled features x [B x d]; rows sum to 1."""
    if x.data.ndim != 2 or x.shape[1] != params.feature_dim:
        raise DimensionError(
            f"softmax_classify: input {x.shape} incompatible with feature dim "
            f"{params.feature_dim}"
        )
    return softmax(linear(x, params.weight, params.bias))


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack [B x d] tensors as the height axis of a single-channel map.

    Output is [B, 1, len(rows), d]; row order is the argument order.
    """
    if not rows:
        raise DimensionError("stack_rows: need at least one row")
    base = rows[0].shape
    for r in rows[1:]:
        if r.shape != base:
            raise DimensionError(f"stack_rows: mismatched row shapes {base} and {r.shape}")
    data = np.stack([r.data for r in rows], axis=1)[:, None, :, :]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(g[:, 0, i, :]) for i in range(len(rows)))

    return make_node(np.ascontiguousarray(data), tuple(rows), backward_fn)


def scale_heights(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply row h of a [B,1,H,W] map by weights[h]; both sides get grads."""
    if x.data.ndim != 4 or weights.data.ndim != 1 or weights.shape[0] != x.shape[2]:
        raise DimensionError(
            f"scale_heights: map {x.shape} incompatible with weights {weights.shape}"
        )

    def backward_fn(g):
        dx = g * weights.data[None, None, :, None]
        dw = (g * x.data).sum(axis=(0, 1, 3))
        return dx, dw

    return make_node(x.data * weights.data[None, None, :, None], (x, weights), backward_fn)
