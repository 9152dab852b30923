"""Differentiable neural operators built on tensor_engine.

Convolution uses the im2col/col2im formulation (stride 1, zero padding).
Parameter factories register their tensors in a ParameterStore under
dotted names and draw initial values from a per-name generator, so the
value of a parameter never depends on what was created before it.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from tensor_engine import ParameterStore, Tensor, apply_op
from utils import err_invalid, err_mismatch, name_seed

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
# Weight init slope; kaiming_bound(fan_in, INIT_SLOPE) == 1/sqrt(fan_in)
INIT_SLOPE = math.sqrt(5.0)


@dataclass
class Conv2dParams:
    weight: Tensor  # (out_c, in_c, k, k)
    bias: Tensor | None = None  # (out_c, 1, 1, 1)
    padding: int | None = None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding


@dataclass
class DepthwiseConv1x1Params:
    weight: Tensor  # (c, 1, 1, 1)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


# --- Convolution ---

def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (n*out_h*out_w, c*k*k) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + out_h, dx:dx + out_w]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, c * k * k)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + out_h, dx:dx + out_w] += cols[:, :, dy, dx]
    return xp


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with zero padding, stride 1."""
    if x.c != p.in_channels:
        raise ValueError(err_mismatch("conv2d input channels", p.in_channels, x.c))
    k, pad, out_c = p.kernel_size, p.pad, p.out_channels
    n, c, h, w = x.shape
    out_h, out_w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(err_invalid(f"conv2d output size ({out_h}, {out_w}) is not positive.", f"Input {h}x{w}, kernel {k}, padding {pad}."))

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, out_h, out_w)
    w_mat = p.weight.data.reshape(out_c, -1)
    out = cols @ w_mat.T
    if p.bias is not None:
        out += p.bias.data.reshape(1, out_c)
    out = out.reshape(n, out_h, out_w, out_c).transpose(0, 3, 1, 2)

    def rule(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        grad_w = (g_mat.T @ cols).reshape(p.weight.shape)
        grad_x = None
        if x.requires_grad:
            grad_xp = _col2im(g_mat @ w_mat, xp.shape, k, out_h, out_w)
            grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
        if p.bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g_mat.sum(axis=0).reshape(p.bias.shape)

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return apply_op("conv2d", inputs, out, rule)


def depthwise_conv1x1(x: Tensor, p: DepthwiseConv1x1Params) -> Tensor:
    """Per-channel scaling: out[n,c,h,w] = weight[c] * x[n,c,h,w]."""
    if x.c != p.channels:
        raise ValueError(err_mismatch("depthwise_conv1x1 channels", p.channels, x.c))
    scale = p.weight.data.reshape(1, x.c, 1, 1)

    def rule(g):
        return g * scale, (g * x.data).sum(axis=(0, 2, 3)).reshape(p.weight.shape)

    return apply_op("depthwise_conv1x1", (x, p.weight), x.data * scale, rule)


# --- Activations and pooling ---

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """max(x, slope*x); derivative 1 at x == 0."""
    positive = x.data >= 0
    slope = x.dtype.type(slope)

    def rule(g):
        return (np.where(positive, g, g * slope),)

    return apply_op("leaky_relu", (x,), np.where(positive, x.data, x.data * slope), rule)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def global_avg_pool(x: Tensor) -> Tensor:
    count = x.h * x.w

    def rule(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return apply_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3), keepdims=True), rule)


# --- Rearrangement ---

def _shuffle(data: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = data.shape
    oc = c // (r * r)
    return data.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle(data: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = data.shape
    return data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(n, c*r*r, h, w) -> (n, c, r*h, r*w); out[n,c,r*i+a,r*j+b] = in[n,c*r*r+a*r+b,i,j]."""
    if r < 1 or x.c % (r * r):
        raise ValueError(err_invalid(f"pixel_shuffle: {x.c} channels not divisible by r^2 = {r * r}."))

    def rule(g):
        return (_unshuffle(g, r),)

    return apply_op("pixel_shuffle", (x,), _shuffle(x.data, r), rule)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if r < 1 or x.h % r or x.w % r:
        raise ValueError(err_invalid(f"pixel_unshuffle: spatial size {x.h}x{x.w} not divisible by {r}."))

    def rule(g):
        return (_shuffle(g, r),)

    return apply_op("pixel_unshuffle", (x,), _unshuffle(x.data, r), rule)


# --- Attention ---

def channel_pair_softmax(s: Tensor) -> Tensor:
    """Two-way softmax between the first and second half of the channels.

    Returns alpha = exp(s1)/(exp(s1)+exp(s2)) with c = s.c/2 channels; the
    partner weight is 1 - alpha.
    """
    if s.c % 2:
        raise ValueError(err_invalid(f"channel_pair_softmax needs an even channel count, got {s.c}."))
    c = s.c // 2
    s1, s2 = s.data[:, :c], s.data[:, c:]
    top = np.maximum(s1, s2)
    e1, e2 = np.exp(s1 - top), np.exp(s2 - top)
    alpha = e1 / (e1 + e2)

    def rule(g):
        local = g * alpha * (1 - alpha)
        return (np.concatenate([local, -local], axis=1),)

    return apply_op("channel_pair_softmax", (s,), alpha, rule)


# --- Parameter factories ---

def _uniform(store_name: str, seed: int, shape: tuple, bound: float, dtype) -> np.ndarray:
    rng = np.random.default_rng(name_seed(seed, store_name))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_bound(fan_in: int, slope: float = INIT_SLOPE) -> float:
    """Kaiming uniform bound. The default slope gives 1/sqrt(fan_in)."""
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return gain * math.sqrt(3.0 / fan_in)


def make_conv2d(
    store: ParameterStore,
    name: str,
    in_c: int,
    out_c: int,
    k: int,
    seed: int = 0,
    dtype=np.float32,
    *,
    zero: bool = False,
    initialize: bool = True,
) -> Conv2dParams:
    """Register `{name}.weight` and `{name}.bias` and return the layer."""
    shape = (out_c, in_c, k, k)
    if zero or not initialize:
        weight = np.zeros(shape, dtype=dtype)
    else:
        weight = _uniform(f"{name}.weight", seed, shape, kaiming_bound(in_c * k * k), dtype)
    w = store.add(f"{name}.weight", Tensor(weight, requires_grad=True))
    b = store.add(f"{name}.bias", Tensor(np.zeros((out_c, 1, 1, 1), dtype=dtype), requires_grad=True))
    return Conv2dParams(w, b)


def make_depthwise(store: ParameterStore, name: str, channels: int, dtype=np.float32) -> DepthwiseConv1x1Params:
    """Register `{name}.weight`, initialised to ones."""
    w = store.add(f"{name}.weight", Tensor(np.ones((channels, 1, 1, 1), dtype=dtype), requires_grad=True))
    return DepthwiseConv1x1Params(w)
