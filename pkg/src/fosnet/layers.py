"""Convolution (zero-padded and partial), pooling, dense, batch norm and the
GAP-FC / 1x1-conv classification heads.

Feature maps are NHWC: ``(N, M, D)`` for one image or ``(B, N, M, D)`` for a
batch.  Conv weights are ``(kh, kw, D_in, D_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import ShapeError, Tensor, matmul, mean, record, transpose, reshape


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class ConvParams:
    weights: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be (kh, kw, D_in, D_out), got {self.weights.shape}")
        kh, kw, _, dout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (dout,):
            raise ShapeError(f"conv bias must have shape ({dout},), got {self.bias.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ValueError(f"invalid stride/pad {self.stride}/{self.pad}")

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    @classmethod
    def init(cls, k: int, d_in: int, d_out: int, rng, stride: int = 1, pad: Optional[int] = None,
             dtype=np.float64) -> "ConvParams":
        pad = (k - 1) // 2 if pad is None else pad
        w = he_normal(rng, (k, k, d_in, d_out), k * k * d_in, dtype)
        return cls(Tensor(w, requires_grad=True, dtype=dtype),
                   Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype), stride, pad)

    def output_hw(self, input_hw) -> tuple[int, int]:
        kh, kw = self.kernel
        h, w = input_hw
        return kernels.out_size(h, kh, self.stride, self.pad), kernels.out_size(w, kw, self.stride, self.pad)


@dataclass
class PartialConvPlan:
    """Scaling mask for one partial convolution layer.

    ``scale[n, m] = kh*kw / (kh*kw - pad_count[n, m])`` where ``pad_count``
    is the number of zero-padded cells under the window of output (n, m).
    """

    scale: np.ndarray
    pad_indicator: np.ndarray
    pad_count: np.ndarray
    input_hw: tuple
    kernel: tuple
    stride: int
    pad: int

    def exact_scale(self, n: int, m: int) -> Fraction:
        kk = self.kernel[0] * self.kernel[1]
        return Fraction(kk, kk - int(self.pad_count[n, m]))


@dataclass
class DenseParams:
    weights: Tensor  # (C, D)
    bias: Tensor  # (C,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"dense params mismatch: W {self.weights.shape}, b {self.bias.shape}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng, dtype=np.float64) -> "DenseParams":
        return cls(Tensor(he_normal(rng, (d_out, d_in), d_in, dtype), requires_grad=True, dtype=dtype),
                   Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype))


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("BN momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("BN epsilon must be positive")

    @classmethod
    def init(cls, channels: int, dtype=np.float64, momentum: float = 0.1, epsilon: float = 1e-5) -> "BNParams":
        return cls(Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
                   Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, epsilon)


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (N, M, D) or (B, N, M, D) feature map, got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _conv(x: Tensor, p: ConvParams, scale: Optional[np.ndarray], op: str) -> Tensor:
    xb, squeeze = _batched(x)
    bsz, h, w, d_in = xb.shape
    kh, kw, wd_in, d_out = p.weights.shape
    if d_in != wd_in:
        raise ShapeError(f"{op}: input has {d_in} channels, weights expect {wd_in}")
    ho, wo = p.output_hw((h, w))
    if ho < 1 or wo < 1:
        raise ShapeError(f"{op}: input {h}x{w} too small for kernel {kh}x{kw}, pad {p.pad}")
    stride, pad = p.stride, p.pad
    w_mat = p.weights.data.reshape(kh * kw * d_in, d_out)
    cols = kernels.im2col(xb.data, kh, kw, stride, pad)
    acc = (cols @ w_mat).reshape(bsz, ho, wo, d_out)
    if scale is not None:
        acc = acc * scale[None, :, :, None]
    out = acc + p.bias.data

    def bw(g):
        gs = g if scale is None else g * scale[None, :, :, None]
        g2 = gs.reshape(-1, d_out)
        gw = (cols.T @ g2).reshape(p.weights.shape)
        gx = kernels.col2im(g2 @ w_mat.T, xb.shape, kh, kw, stride, pad) if xb.requires_grad else None
        return gx, gw, g.sum(axis=(0, 1, 2))

    y = record(op, out, (xb, p.weights, p.bias), bw)
    return _unbatch(y, squeeze)


def conv2d_zero_pad(x: Tensor, p: ConvParams) -> Tensor:
    """Vanilla convolution over a zero-filled border of width ``p.pad``."""
    return _conv(x, p, None, "conv2d_zero_pad")


def build_partial_plan(input_hw, p: ConvParams) -> PartialConvPlan:
    h, w = (int(v) for v in input_hw)
    kh, kw = p.kernel
    pad, stride = p.pad, p.stride
    indicator = np.ones((h + 2 * pad, w + 2 * pad), dtype=np.int64)
    indicator[pad:pad + h, pad:pad + w] = 0
    ho, wo = p.output_hw((h, w))
    if ho < 1 or wo < 1:
        raise ShapeError(f"build_partial_plan: no valid output for {h}x{w} input")
    counts = sliding_window_view(indicator, (kh, kw)).sum(axis=(2, 3))[::stride, ::stride][:ho, :wo]
    kk = kh * kw
    if (counts >= kk).any():
        raise ValueError("build_partial_plan: a window lies entirely in padding (degenerate geometry)")
    scale = np.array([[float(Fraction(kk, kk - int(c))) for c in row] for row in counts])
    return PartialConvPlan(scale=scale, pad_indicator=indicator.astype(bool), pad_count=counts,
                           input_hw=(h, w), kernel=(kh, kw), stride=stride, pad=pad)


def partial_conv2d(x: Tensor, p: ConvParams, plan: PartialConvPlan) -> Tensor:
    """``scale * (W * x_pad) + bias``; the bias is added after scaling."""
    hw = x.shape[-3:-1]
    if (tuple(hw) != tuple(plan.input_hw) or tuple(plan.kernel) != p.kernel
            or plan.stride != p.stride or plan.pad != p.pad):
        raise ShapeError(
            f"partial_conv2d: plan built for input {plan.input_hw}, kernel {plan.kernel}, "
            f"stride {plan.stride}, pad {plan.pad}; got input {tuple(hw)}, kernel {p.kernel}, "
            f"stride {p.stride}, pad {p.pad}")
    return _conv(x, p, plan.scale.astype(x.dtype), "partial_conv2d")


# ----------------------------------------------------------------------------
# pooling and heads
# ----------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Channelwise mean over the spatial grid: (N,M,D)->(D,), (B,N,M,D)->(B,D)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected rank 3 or 4, got {x.shape}")
    return mean(x, axis=(-3, -2))


def dense(x: Tensor, d: DenseParams) -> Tensor:
    if x.shape[-1] != d.weights.shape[1]:
        raise ShapeError(f"dense: input dim {x.shape[-1]} != weight dim {d.weights.shape[1]}")
    return matmul(x, transpose(d.weights)) + d.bias


def conv1x1_head(x: Tensor, d: DenseParams) -> Tensor:
    """Per-cell class scores ``W x[n, m] + b`` as an (.., N, M, C) grid."""
    c, dim = d.weights.shape
    if x.shape[-1] != dim:
        raise ShapeError(f"conv1x1_head: input dim {x.shape[-1]} != weight dim {dim}")
    kernel = reshape(transpose(d.weights), (1, 1, dim, c))
    return conv2d_zero_pad(x, ConvParams(kernel, d.bias, 1, 0))


def gap_fc_head(x: Tensor, d: DenseParams) -> Tensor:
    """Classic head: GAP then a fully connected layer."""
    return dense(global_avg_pool(x), d)


@dataclass
class ConvertedHead:
    """A GAP-FC head rewritten as 1x1 convolution followed by GAP.

    Shares parameter storage with the original :class:`DenseParams`.
    """

    params: DenseParams

    def grid(self, x: Tensor) -> Tensor:
        return conv1x1_head(x, self.params)

    def __call__(self, x: Tensor) -> Tensor:
        return global_avg_pool(self.grid(x))


def convert_head(gap_fc: DenseParams) -> ConvertedHead:
    return ConvertedHead(gap_fc)


# ----------------------------------------------------------------------------
# batch normalisation
# ----------------------------------------------------------------------------


def batch_norm(x: Tensor, p: BNParams, training: bool) -> Tensor:
    """Per-channel normalisation over every axis but the last."""
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: expected a batch, got shape {x.shape}")
    ch = x.shape[-1]
    if p.gamma.shape != (ch,):
        raise ShapeError(f"batch_norm: {ch} channels vs params for {p.gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    gamma = p.gamma.data
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm: training mode needs a batch of at least 2")
        count = xd.size // ch
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (xd - mu) * inv
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mu
        p.running_var[...] = (1 - m) * p.running_var + m * var * count / (count - 1)

        def bw(g):
            gsum = g.sum(axis=axes)
            gxhat = (g * xhat).sum(axis=axes)
            gx = (gamma * inv / count) * (count * g - gsum - xhat * gxhat)
            return gx, gxhat, gsum
    else:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (xd - p.running_mean) * inv

        def bw(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (gamma * xhat + p.beta.data).astype(xd.dtype, copy=False)
    return record("batch_norm", out, (x, p.gamma, p.beta), bw)

