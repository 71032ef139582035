"""1-D convolution, activation and normalization ops with backward rules.

Forward passes accumulate in a fixed order (kernel tap, then input channel)
using elementwise numpy arithmetic only. Each output sample is therefore
computed by the same sequence of float operations whatever the signal
length, which is what makes chunked causal inference bit-identical to a
single whole-signal pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, leaky_relu, make_op, mul, prelu, relu, sigmoid
from . import autodiff as ad

PADDING_MODES = ("none", "same", "causal")
NORM_MODES = ("global", "channel", "cumulative")


@dataclass(frozen=True)
class Conv1dSpec:
    """Shape description of one 1-D convolution.

    ``padding`` is "none", "same" (symmetric, extra sample on the right when
    the span is odd) or "causal" (all padding on the left).
    """

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    dilation: int = 1
    padding: str = "none"
    depthwise: bool = False
    bias: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ValueError("depthwise convolution needs in_channels == out_channels")

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def pads(self) -> tuple[int, int]:
        total = self.dilation * (self.kernel_size - 1)
        if self.padding == "none":
            return 0, 0
        if self.padding == "causal":
            return total, 0
        return total // 2, total - total // 2

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        cin = 1 if self.depthwise else self.in_channels
        return self.out_channels, cin, self.kernel_size

    def output_length(self, length: int) -> int:
        left, right = self.pads
        if length + left + right < self.span:
            raise ValueError(
                f"kernel span {self.span} exceeds padded length {length + left + right}")
        return (length + left + right - self.span) // self.stride + 1

    def n_params(self) -> int:
        w = int(np.prod(self.weight_shape))
        return w + (self.out_channels if self.bias and not self.depthwise else 0)


def conv1d(x: Tensor, spec: Conv1dSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Convolve ``x`` of shape (..., in_channels, T) according to ``spec``."""
    if x.ndim < 2 or x.shape[-2] != spec.in_channels:
        raise ValueError(f"expected (..., {spec.in_channels}, T) input, got {x.shape}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    length = x.shape[-1]
    n_out = spec.output_length(length)
    left, right = spec.pads
    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 1) + [(left, right)])
    w = weight.data
    stop = spec.stride * (n_out - 1) + 1
    taps = [slice(j * spec.dilation, j * spec.dilation + stop, spec.stride)
            for j in range(spec.kernel_size)]

    out = np.zeros(x.shape[:-2] + (spec.out_channels, n_out), dtype=xp.dtype)
    for j, sl in enumerate(taps):
        xs = xp[..., sl]
        if spec.depthwise:
            out += w[:, 0, j, None] * xs
        else:
            for c in range(spec.in_channels):
                out += w[:, c, j, None] * xs[..., c:c + 1, :]
    if bias is not None:
        out += bias.data[:, None]

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        g3 = g.reshape(-1, spec.out_channels, n_out)
        for j, sl in enumerate(taps):
            xs3 = xp[..., sl].reshape(-1, xp.shape[-2], n_out)
            if spec.depthwise:
                gxp[..., sl] += w[:, 0, j, None] * g
                gw[:, 0, j] = np.einsum("bot,bot->o", g3, xs3)
            else:
                gxp[..., sl] += np.einsum("oc,...ot->...ct", w[:, :, j], g)
                gw[:, :, j] = np.einsum("bot,bct->oc", g3, xs3)
        gx = gxp[..., left:left + length]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, inputs, back)


def conv1d_output_length(length: int, kernel_size: int, stride: int = 1, dilation: int = 1,
                         pad_total: int = 0) -> int:
    return (length + pad_total - dilation * (kernel_size - 1) - 1) // stride + 1


def transposed_conv1d(s: Tensor, weight: Tensor, stride: int) -> Tensor:
    """Overlap-add synthesis: (..., N, K) frames through filters (N, L) -> (..., 1, (K-1)*stride + L).

    Adjoint of ``conv1d`` with one input channel, kernel L, the same stride
    and no padding.
    """
    if weight.ndim != 2 or s.ndim < 2 or s.shape[-2] != weight.shape[0]:
        raise ValueError(f"frames {s.shape} do not match filters {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    n_filters, flen = weight.shape
    n_frames = s.shape[-1]
    lead = s.shape[:-2]
    n_blocks = -(-flen // stride)
    padded = n_blocks * stride
    length = (n_frames - 1) * stride + flen

    v = weight.data
    frames = np.zeros(lead + (n_frames, padded), dtype=s.data.dtype)
    for n in range(n_filters):
        frames[..., :flen] += s.data[..., n, :, None] * v[n]
    blocks = frames.reshape(lead + (n_frames, n_blocks, stride))

    total = (n_frames + n_blocks - 1) * stride
    out = np.zeros(lead + (total,), dtype=frames.dtype)
    for b in range(n_blocks):
        out[..., b * stride:(b + n_frames) * stride] += blocks[..., b, :].reshape(lead + (n_frames * stride,))
    out = out[..., :length].reshape(lead + (1, length))

    def back(g):
        gfull = np.zeros(lead + (total,), dtype=g.dtype)
        gfull[..., :length] = g[..., 0, :]
        gframes = np.empty(lead + (n_frames, n_blocks, stride), dtype=g.dtype)
        for b in range(n_blocks):
            gframes[..., b, :] = gfull[..., b * stride:(b + n_frames) * stride].reshape(
                lead + (n_frames, stride))
        gframes = gframes.reshape(lead + (n_frames, padded))[..., :flen]
        gs = np.einsum("...kl,nl->...nk", gframes, v)
        gv = np.einsum("bnk,bkl->nl", s.data.reshape(-1, n_filters, n_frames),
                       gframes.reshape(-1, n_frames, flen))
        return gs, gv

    return make_op(out, (s, weight), back)


def activation(kind: str, x: Tensor, slope: float = 0.01, alpha: Tensor | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        if not 0 < slope < 1:
            raise ValueError("leaky_relu slope must lie in (0, 1)")
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "prelu":
        if alpha is None:
            raise ValueError("prelu needs a slope tensor")
        return prelu(x, alpha)
    raise ValueError(f"unknown activation {kind!r}")


def glu(a: Tensor, b: Tensor) -> Tensor:
    """Gated linear unit: ``a * sigmoid(b)``."""
    if a.shape != b.shape:
        raise ValueError(f"glu halves differ in shape: {a.shape} vs {b.shape}")
    return mul(a, sigmoid(b))


def _channel_sum(x: np.ndarray) -> np.ndarray:
    # fixed left-to-right order so the result per frame is independent of T
    acc = x[..., 0:1, :].copy()
    for c in range(1, x.shape[-2]):
        acc += x[..., c:c + 1, :]
    return acc


def channel_norm(x: Tensor, mode: str, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize (..., C, T) activations, then scale and shift per channel.

    ``global``: statistics over all channels and frames of each example.
    ``channel``: statistics over channels of each frame separately.
    ``cumulative``: statistics over channels and frames up to and including t.
    """
    if mode not in NORM_MODES:
        raise ValueError(f"unknown norm mode {mode!r}")
    if mode == "cumulative":
        return _cumulative_norm(x, gain, bias, eps)

    n_ch, n_t = x.shape[-2:]
    if mode == "global":
        count = n_ch * n_t
        total = lambda a: a.sum(axis=(-2, -1), keepdims=True)
    else:
        count = n_ch
        total = _channel_sum
    mu = total(x.data) / count
    xc = x.data - mu
    var = total(xc * xc) / count
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def back(g):
        gy = g * gain.data
        gx = inv * (gy - total(gy) / count - y * (total(gy * y) / count))
        red = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
        ggain = (g * y).sum(axis=red).reshape(gain.shape)
        gbias = g.sum(axis=red).reshape(bias.shape)
        return gx, ggain, gbias

    return make_op(out, (x, gain, bias), back)


def _cumulative_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    n_ch, n_t = x.shape[-2:]
    count = Tensor(n_ch * np.arange(1, n_t + 1, dtype=np.float64))
    csum = ad.cumsum(x.sum(axes=-2, keepdims=True), axis=-1)
    csq = ad.cumsum((x * x).sum(axes=-2, keepdims=True), axis=-1)
    mean = csum / count
    var = ad.relu(csq / count - mean * mean)
    y = (x - mean) / ad.sqrt(var + eps)
    return y * gain + bias

