"""Layers shared by the backbones and the spatial transformer.

Each block is a small :class:`Module` holding its tensors, with the maths in
a module-level function (``conv2d``, ``batchnorm2d``, ``encoder_layer`` ...)
so the functional form can be gradient-checked in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, as_tensor, make_result, softmax, sqrt

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


class Module:
    """Container with named tensors.

    Tensor attributes are parameters unless listed in ``_buffer_names``;
    buffers (running statistics) are persisted but never optimized.
    """

    _buffer_names: tuple[str, ...] = ()
    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and name not in self._buffer_names:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and name in self._buffer_names:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = dict(self.named_parameters(prefix))
        out.update(self.named_buffers(prefix))
        return dict(sorted(out.items()))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [B,C,H,W] with ``weight`` [O,C,kh,kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")

    # columns are ordered (kh, kw, C) so the backward scatter works on
    # contiguous channel runs of a channels-last buffer
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    inputs = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, C)
            gxh = np.zeros(xh.shape)
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxh[:, padding : padding + H, padding : padding + W].transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, inputs, bw)


class Conv2d(Module):
    """Weight [out_ch, in_ch, k, k], bias [out_ch]."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None) -> None:
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = rng or np.random.default_rng(0)
        self.weight = he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.bias = zeros_param(out_ch)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    H, W = x.shape[-2:]

    def bw(g):
        g = g.reshape(g.shape[:-2] + (H, factor, W, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_result(out, (x,), bw)


# -------------------------------------------------------------- normalization


@dataclass
class RunningStats:
    """Running per-channel mean and variance, updated in place."""

    mean: Tensor
    var: Tensor

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(Tensor(np.zeros(channels)), Tensor(np.ones(channels)))


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, mode: str, running: RunningStats,
                momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization of ``x`` [B,C,H,W].

    Train mode normalizes with batch statistics and moves the running
    statistics (unbiased variance) towards them; eval mode uses the running
    statistics only.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if scale.shape != (C,) or shift.shape != (C,):
        raise ValueError(f"batchnorm2d: scale/shift must have shape ({C},)")
    view = (1, C, 1, 1)
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        xhat = centered / sqrt(var + BN_EPS)
        batch_var = var.data.reshape(C)
        running.mean.data[...] = (1 - momentum) * running.mean.data + momentum * mean.data.reshape(C)
        running.var.data[...] = (1 - momentum) * running.var.data + momentum * batch_var * n / (n - 1)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(running.var.data + BN_EPS)
        xhat = (x - running.mean.data.reshape(view)) * inv.reshape(view)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return xhat * scale.reshape(view) + shift.reshape(view)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int) -> None:
        self.scale = ones_param(channels)
        self.shift = zeros_param(channels)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        return batchnorm2d(x, self.scale, self.shift, mode, RunningStats(self.running_mean, self.running_var))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + LN_EPS) * scale + shift


# ------------------------------------------------------------------- dense


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    y = x @ weight
    return y if bias is None else y + bias


class Linear(Module):
    """``y = x @ weight + bias`` with weight [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None) -> None:
        rng = rng or np.random.default_rng(0)
        self.weight = he_uniform(rng, (d_in, d_out), d_in)
        self.bias = zeros_param(d_out)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# ----------------------------------------------------------------- residual


class BasicBlock(Module):
    """Two 3x3 conv-BN stages with an identity or 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, rng: np.random.Generator | None = None) -> None:
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, rng=rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, 1, stride, rng=rng)
            self.down_bn = BatchNorm2d(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        return residual_block(x, self)


def residual_block(x: Tensor, p: BasicBlock) -> Tensor:
    """relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))."""
    if x.shape[1] != p.conv1.weight.shape[1]:
        raise ValueError(f"residual_block: input has {x.shape[1]} channels, block expects "
                         f"{p.conv1.weight.shape[1]}")
    h = p.bn1(p.conv1(x)).relu()
    h = p.bn2(p.conv2(h))
    shortcut = x if p.down_conv is None else p.down_bn(p.down_conv(x))
    return (h + shortcut).relu()


# -------------------------------------------------------------- transformer


class EncoderLayer(Module):
    """Post-norm transformer encoder layer parameters."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator | None = None) -> None:
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        rng = rng or np.random.default_rng(0)
        self.n_heads = n_heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w_{name}", he_uniform(rng, (d_model, d_model), d_model))
            setattr(self, f"b_{name}", zeros_param(d_model))
        self.w_ff1 = he_uniform(rng, (d_model, d_ff), d_model)
        self.b_ff1 = zeros_param(d_ff)
        self.w_ff2 = he_uniform(rng, (d_ff, d_model), d_ff)
        self.b_ff2 = zeros_param(d_model)
        self.ln1_scale = ones_param(d_model)
        self.ln1_shift = zeros_param(d_model)
        self.ln2_scale = ones_param(d_model)
        self.ln2_shift = zeros_param(d_model)

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def forward(self, tokens: Tensor) -> Tensor:
        return encoder_layer(tokens, self)


def multi_head_attention(tokens: Tensor, p: EncoderLayer, return_weights: bool = False):
    """Bidirectional scaled dot-product self-attention over [B,T,d_model]."""
    if tokens.ndim != 3 or tokens.shape[-1] != p.d_model:
        raise ValueError(f"attention expects [B,T,{p.d_model}], got {tokens.shape}")
    B, T, d = tokens.shape
    h = p.n_heads
    dh = d // h

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

    q = split(linear(tokens, p.w_q, p.b_q))
    k = split(linear(tokens, p.w_k, p.b_k))
    v = split(linear(tokens, p.w_v, p.b_v))
    weights = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
    heads = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = linear(heads, p.w_o, p.b_o)
    return (out, weights) if return_weights else out


def encoder_layer(tokens: Tensor, p: EncoderLayer) -> Tensor:
    x = layer_norm(tokens + multi_head_attention(tokens, p), p.ln1_scale, p.ln1_shift)
    ff = linear(linear(x, p.w_ff1, p.b_ff1).relu(), p.w_ff2, p.b_ff2)
    return layer_norm(x + ff, p.ln2_scale, p.ln2_shift)
