"""Differentiable kernels for 5-D activations laid out as (batch, channel, x, y, z)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(eq=False)
class ConvParams:
    weight: Tensor  # (out_channels, in_channels, k, k, k)
    bias: Tensor  # (out_channels,)
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 5 or not (w[2] == w[3] == w[4]):
            raise ValueError(f"kernel must have shape (out, in, k, k, k), got {w}")
        if w[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {w[2]}")
        if self.bias.shape != (w[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {w[0]} output channels")
        if self.dilation < 1 or self.padding < 0:
            raise ValueError("dilation must be >= 1 and padding >= 0")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @classmethod
    def zeros(cls, in_channels, out_channels, k=3, dilation=1, padding=None, dtype=np.float32):
        if padding is None:
            padding = dilation * (k - 1) // 2
        return cls(
            Tensor(np.zeros((out_channels, in_channels, k, k, k), dtype=dtype), requires_grad=True),
            Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True),
            dilation,
            padding,
        )

    def parameters(self):
        return [self.weight, self.bias]


@dataclass(eq=False)
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def neutral(cls, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        return cls(
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
            eps,
            momentum,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def parameters(self):
        return [self.gamma, self.beta]


def _spatial(x):
    return x.shape[2:]


def conv_output_size(n, k, dilation, padding):
    return n + 2 * padding - dilation * (k - 1)


def _taps(k):
    return [(i, j, m) for i in range(k) for j in range(k) for m in range(k)]


def conv3d_dilated(x, p):
    """Dilated volumetric convolution.

    ``out[b, o, v] = bias[o] + sum_{c, t} w[o, c, t] * in[b, c, v - l * (t - center)]``
    with zero padding. Kernel taps are visited one at a time; each tap is a
    (out, in) x (in, voxels) matrix product over a strided view of the input.
    """
    if x.data.ndim != 5:
        raise ValueError(f"conv input must be 5-D (batch, channel, x, y, z), got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {p.in_channels}")
    k, l, pad = p.kernel_size, p.dilation, p.padding
    span = l * (k - 1) + 1
    if any(n + 2 * pad < span for n in _spatial(x)):
        raise ValueError(f"effective kernel span {span} exceeds padded input {_spatial(x)} + 2*{pad}")

    xd = x.data
    w = p.weight.data
    dtype = np.result_type(xd.dtype, w.dtype)
    B = xd.shape[0]
    out_sp = tuple(conv_output_size(n, k, l, pad) for n in _spatial(x))
    xp = np.pad(xd, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else xd
    taps = _taps(k)

    def window(t):
        # flipped kernel: tap index t reads input offset l * (k - 1 - t)
        s = [l * (k - 1 - ti) for ti in t]
        return xp[:, :, s[0]:s[0] + out_sp[0], s[1]:s[1] + out_sp[1], s[2]:s[2] + out_sp[2]]

    acc = np.zeros((p.out_channels, B) + out_sp, dtype=dtype)
    for t in taps:
        acc += np.tensordot(w[(slice(None), slice(None)) + t], window(t), axes=([1], [1]))
    acc += p.bias.data.reshape(-1, 1, 1, 1, 1)
    out = Tensor(np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4)), _parents=(x, p.weight, p.bias), _op="conv3d")

    def _backward():
        g = out.grad
        g_ocn = g.transpose(1, 0, 2, 3, 4)  # (O, B, sx, sy, sz)
        if p.bias.requires_grad:
            p.bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if p.weight.requires_grad:
            gw = np.empty_like(w)
            for t in taps:
                gw[(slice(None), slice(None)) + t] = np.tensordot(
                    g_ocn, window(t), axes=([1, 2, 3, 4], [0, 2, 3, 4]))
            p.weight._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=dtype)
            for t in taps:
                s = [l * (k - 1 - ti) for ti in t]
                contrib = np.tensordot(w[(slice(None), slice(None)) + t], g_ocn, axes=([0], [0]))
                gxp[:, :, s[0]:s[0] + out_sp[0], s[1]:s[1] + out_sp[1], s[2]:s[2] + out_sp[2]] += \
                    contrib.transpose(1, 0, 2, 3, 4)
            if pad:
                gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
            x._accumulate(gxp)

    out._backward = _backward
    return out


def batchnorm(x, p, mode="infer"):
    """Per-channel normalization over (batch, x, y, z).

    ``mode="train"`` uses batch statistics and updates the running estimates
    in place (unbiased variance, as is conventional); ``"infer"`` uses the
    running estimates.
    """
    if x.shape[1] != p.channels:
        raise ValueError(f"input has {x.shape[1]} channels, batchnorm expects {p.channels}")
    xd = x.data
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    gamma, beta = p.gamma.data.reshape(shape), p.beta.data.reshape(shape)

    if mode == "train":
        n = xd.size // xd.shape[1]
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        p.running_mean *= 1 - p.momentum
        p.running_mean += p.momentum * mean
        unbiased = var * n / max(n - 1, 1)
        p.running_var *= 1 - p.momentum
        p.running_var += p.momentum * unbiased
    elif mode == "infer":
        mean, var, n = p.running_mean, p.running_var, None
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(xd.dtype).reshape(shape)
    xhat = (xd - mean.astype(xd.dtype).reshape(shape)) * inv_std
    out = Tensor(xhat * gamma + beta, _parents=(x, p.gamma, p.beta), _op="batchnorm")

    def _backward():
        g = out.grad
        p.beta._accumulate(g.sum(axis=axes))
        p.gamma._accumulate((g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * gamma
        if mode == "infer":
            x._accumulate(gxhat * inv_std)
            return
        # d/dx of (x - mean) / std with batch statistics
        m1 = gxhat.mean(axis=axes, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        x._accumulate((gxhat - m1 - xhat * m2) * inv_std)

    out._backward = _backward
    return out


def relu(x):
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False), _parents=(x,), _op="relu")

    def _backward():
        # subgradient at 0 is 0
        x._accumulate(out.grad * mask)

    out._backward = _backward
    return out


def dropout3d(x, p, mode="infer", rng=None):
    """Zero whole (batch, channel) feature maps with probability ``p``.

    Survivors are scaled by ``1 / (1 - p)`` in train mode so inference is the
    identity.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "infer" or p == 0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = rng.random(x.shape[:2]) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype).reshape(x.shape[:2] + (1, 1, 1))
    out = Tensor(x.data * scale, _parents=(x,), _op="dropout3d")

    def _backward():
        x._accumulate(out.grad * scale)

    out._backward = _backward
    return out


def logsoftmax(x, axis=1):
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    outd = shifted - lse
    out = Tensor(outd, _parents=(x,), _op="logsoftmax")

    def _backward():
        g = out.grad
        x._accumulate(g - np.exp(outd) * g.sum(axis=axis, keepdims=True))

    out._backward = _backward
    return out


def cross_entropy(logprobs, labels):
    """Mean negative log-probability of the true class over all voxels."""
    labels = np.asarray(labels)
    C = logprobs.shape[1]
    if labels.shape != (logprobs.shape[0],) + logprobs.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logprobs {logprobs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C - 1}], found range [{labels.min()}, {labels.max()}]")
    idx = labels[:, None].astype(np.intp)
    picked = np.take_along_axis(logprobs.data, idx, axis=1)
    n = labels.size
    out = Tensor(-picked.sum() / n, _parents=(logprobs,), _op="cross_entropy")

    def _backward():
        g = np.zeros_like(logprobs.data)
        np.put_along_axis(g, idx, -out.grad / n, axis=1)
        logprobs._accumulate(g)

    out._backward = _backward
    return out


def softmax(x, axis=1):
    """Plain array softmax, used for probabilities at inference."""
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)
