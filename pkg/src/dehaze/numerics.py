"""Small NCHW tensor engine with explicit backward passes.

Tensors are plain ``numpy`` arrays of shape (N, C, H, W). Layers keep their
parameters as arrays so an optimizer can update them in place; every forward
op has a matching backward op that returns exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

# Kernels at least this wide go through the FFT path (stride 1 only).
FFT_MIN_KERNEL = 9


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def check_nchw(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}", "rank")


# ---------------------------------------------------------------- convolution


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        o, _, kh, kw = self.kernel.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}", "kernel")
        if self.bias.shape != (o,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({o},)", "bias")
        if self.stride not in (1, 2):
            raise ValueError(f"only strides 1 and 2 are supported, got {self.stride}")
        if self.padding is None:
            self.padding = (kh - 1) // 2

    @classmethod
    def zeros(cls, in_channels, out_channels, k, stride=1, dtype=np.float64):
        return cls(
            np.zeros((out_channels, in_channels, k, k), dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
            stride=stride,
        )

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def size(self) -> int:
        return self.kernel.shape[2]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, p, s = self.size, self.padding, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _use_fft(layer: ConvLayer) -> bool:
    return layer.stride == 1 and layer.size >= FFT_MIN_KERNEL


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> None:
    check_nchw(x)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {layer.in_channels}",
            "channels",
        )
    ho, wo = layer.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} too small for kernel {layer.size}", "height")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # rows ordered (c, ki, kj), columns (n, h, w)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


# Target size of one im2col chunk; keeps the GEMM operands cache resident.
_CHUNK_BYTES = 1 << 19


def _row_chunks(c: int, k: int, h: int, w: int, itemsize: int):
    rows = max(1, _CHUNK_BYTES // (c * k * k * w * itemsize))
    for r0 in range(0, h, rows):
        yield r0, min(rows, h - r0)


def _fill_cols(cols: np.ndarray, xp_n: np.ndarray, r0: int, r: int, k: int, w: int) -> np.ndarray:
    """im2col of output rows [r0, r0 + r) of one padded image (stride 1)."""
    view = cols[:, :, :, :r]
    for i in range(k):
        for j in range(k):
            view[:, i, j] = xp_n[:, r0 + i : r0 + i + r, j : j + w]
    return view.reshape(cols.shape[0] * k * k, r * w)


def _direct_conv(x: np.ndarray, kernel: np.ndarray, padding: int) -> np.ndarray:
    """Stride-1 cross-correlation without bias, in cache-sized row chunks."""
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    xp = _pad(x, padding)
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    wmat = np.ascontiguousarray(kernel.reshape(o, -1), dtype=x.dtype)
    out = np.empty((n, o, ho, wo), dtype=x.dtype)
    cols = None
    for b in range(n):
        for r0, r in _row_chunks(c, k, ho, wo, x.itemsize):
            if cols is None:
                cols = np.empty((c, k, k, r, wo), dtype=x.dtype)
            block = _fill_cols(cols, xp[b], r0, r, k, wo)
            np.matmul(wmat, block, out=out[b, :, r0 : r0 + r].reshape(o, r * wo))
    return out


def _fft_size(hp: int, wp: int) -> tuple[int, int]:
    return sfft.next_fast_len(hp, real=True), sfft.next_fast_len(wp, real=True)


def _channel_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[i, j, f] = sum_c a[i, c, f] * b[c, j, f] for spectra flattened over f."""
    # batched over frequency bins: (F, I, C) @ (F, C, J)
    out = np.matmul(a.transpose(2, 0, 1), b.transpose(2, 0, 1))
    return out.transpose(1, 2, 0)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Zero-padded cross-correlation of ``x`` with ``layer.kernel`` plus bias."""
    _check_conv_input(x, layer)
    n, c, h, w = x.shape
    o, k = layer.out_channels, layer.size
    ho, wo = layer.output_hw(h, w)
    if _use_fft(layer):
        xp = _pad(x, layer.padding)
        shape = _fft_size(*xp.shape[2:])
        xf = sfft.rfft2(xp, s=shape).reshape(n, c, -1)
        kf = np.conj(sfft.rfft2(layer.kernel, s=shape)).reshape(o, c, -1)
        yf = _channel_contract(xf, kf.transpose(1, 0, 2))
        out = sfft.irfft2(yf.reshape(n, o, shape[0], -1), s=shape)[:, :, :ho, :wo].astype(x.dtype, copy=False)
    elif layer.stride == 1:
        out = _direct_conv(x, layer.kernel, layer.padding)
    else:
        cols = _im2col(_pad(x, layer.padding), k, layer.stride, ho, wo)
        out = (layer.kernel.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(
    x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward wrt input, kernel and bias."""
    _check_conv_input(x, layer)
    n, c, h, w = x.shape
    o, k, p, s = layer.out_channels, layer.size, layer.padding, layer.stride
    ho, wo = layer.output_hw(h, w)
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, o, ho, wo)}", "grad_out")
    grad_out = np.ascontiguousarray(grad_out, dtype=x.dtype)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    xp = _pad(x, p)
    hp, wp = xp.shape[2:]

    if _use_fft(layer):
        shape = _fft_size(hp, wp)
        xf = sfft.rfft2(xp, s=shape).reshape(n, c, -1)
        kf = sfft.rfft2(layer.kernel, s=shape).reshape(o, c, -1)
        gf = sfft.rfft2(grad_out, s=shape).reshape(n, o, -1)
        # input gradient is the full convolution of grad_out with the kernel
        gxf = _channel_contract(gf, kf)
        gxp = sfft.irfft2(gxf.reshape(n, c, shape[0], -1), s=shape)[:, :, :hp, :wp]
        # kernel gradient is the correlation of the padded input with grad_out
        gkf = _channel_contract(np.conj(gf).transpose(1, 0, 2), xf)
        gk = sfft.irfft2(gkf.reshape(o, c, shape[0], -1), s=shape)[:, :, :k, :k]
        grad_input = gxp[:, :, p : p + h, p : p + w].astype(x.dtype, copy=False)
        grad_kernel = gk.astype(layer.kernel.dtype, copy=False)
    elif s == 1:
        # input gradient: correlate grad_out with the flipped, transposed kernel
        flipped = layer.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_input = _direct_conv(grad_out, flipped, k - 1 - p)
        gk = np.zeros((o, c * k * k), dtype=x.dtype)
        cols = None
        for b in range(n):
            for r0, r in _row_chunks(c, k, ho, wo, x.itemsize):
                if cols is None:
                    cols = np.empty((c, k, k, r, wo), dtype=x.dtype)
                block = _fill_cols(cols, xp[b], r0, r, k, wo)
                gk += grad_out[b, :, r0 : r0 + r].reshape(o, r * wo) @ block.T
        grad_kernel = gk.reshape(layer.kernel.shape)
    else:
        cols = _im2col(xp, k, s, ho, wo)
        g2 = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
        grad_kernel = (g2 @ cols.T).reshape(layer.kernel.shape)
        dcols = (layer.kernel.reshape(o, -1).T @ g2).reshape(c, k, k, n, ho, wo)
        gxp = np.zeros((c, n, hp, wp), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, i, j]
        grad_input = gxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_input), np.ascontiguousarray(grad_kernel), grad_bias


# ---------------------------------------------------------------- activations

ACTIVATIONS = ("identity", "relu", "leaky_relu", "sigmoid", "scaled_tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def activation_forward(x: np.ndarray, kind: str, slope: float = 0.2) -> np.ndarray:
    if kind == "identity":
        return x.copy()
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, slope * x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "scaled_tanh":
        return 0.5 * (np.tanh(x) + 1.0)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(x: np.ndarray, kind: str, grad_out: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """Gradient wrt the pre-activation ``x``."""
    if kind == "identity":
        return grad_out.copy()
    if kind == "relu":
        return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)
    if kind == "leaky_relu":
        return np.where(x > 0, grad_out, slope * grad_out)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return grad_out * s * (1 - s)
    if kind == "scaled_tanh":
        t = np.tanh(x)
        return grad_out * 0.5 * (1 - t * t)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------- concat


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_nchw(a, "a")
    check_nchw(b, "b")
    for axis, dim in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"cannot concatenate: {dim} {a.shape[axis]} != {b.shape[axis]}", dim)
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, channels_a: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of concat_channels: split the gradient at ``channels_a``."""
    return grad[:, :channels_a], grad[:, channels_a:]


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "BatchNorm":
        return cls(
            np.ones(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
        )


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batch_norm_forward(x: np.ndarray, bn: BatchNorm, mode: str = "train") -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel normalization over (N, H, W).

    In train mode the batch statistics are used and the running statistics are
    updated in place; eval mode uses the running statistics only.
    """
    check_nchw(x)
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel", "batch")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = bn.momentum
        bn.running_mean *= 1 - m
        bn.running_mean += m * mean
        bn.running_var *= 1 - m
        bn.running_var += m * var * count / (count - 1)
    elif mode == "eval":
        mean, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * bn.gamma[None, :, None, None] + bn.beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), BatchNormCache(xhat, inv_std, bn.gamma.copy(), mode)


def batch_norm_backward(
    cache: BatchNormCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma = cache.xhat, cache.inv_std, cache.gamma
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if cache.mode == "eval":
        return gxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_in = (gxhat - mean_g - xhat * mean_gx) * inv_std[None, :, None, None]
    return grad_in.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    learning_rate: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}", name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------- gradient check


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    f: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    h: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between ``grads`` and central differences of ``f``.

    ``f`` takes no arguments and reads ``params``, which are perturbed in place
    and restored afterwards. ``max_entries`` limits the check to a random
    subset of entries per parameter. ``floor`` bounds the relative-error
    denominator from below, so gradients that are zero up to round-off pass.
    """
    worst = 0.0
    for name, p in params.items():
        if not p.flags.c_contiguous:
            raise ValueError(f"parameter {name!r} must be contiguous to be perturbed in place")
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        analytic = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(np.float64(analytic[i]), np.float64(numeric), floor)))
    return worst
