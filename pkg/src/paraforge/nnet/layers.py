"""Layer set with analytic backward passes.

Convolutional layers use a channel-major ``(C, N, H, W)`` layout so that
every convolution is a single ``(O, C*k*k) @ (C*k*k, N*Ho*Wo)`` product
without transposes.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Module, Tensor, he_uniform


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 bias=False, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        self.k, self.stride = k, stride
        self.padding = k // 2 if padding is None else padding
        self.in_channels, self.out_channels = in_channels, out_channels
        fan_in = in_channels * k * k
        self.weight = Tensor(he_uniform(rng, (out_channels, in_channels, k, k), fan_in, dtype), name="weight")
        self.bias = Tensor(np.zeros(out_channels, dtype), name="bias") if bias else None

    def _cols(self, xp, ho, wo):
        c, n = xp.shape[:2]
        k, s = self.k, self.stride
        cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
        return cols.reshape(c * k * k, n * ho * wo)

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.in_channels:
            raise ShapeError(f"Conv2d expects ({self.in_channels}, N, H, W), got {x.shape}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, n, hp, wp = xp.shape
        ho = (hp - self.k) // self.stride + 1
        wo = (wp - self.k) // self.stride + 1
        self._xp, self._out_hw, self._in_hw = xp, (ho, wo), x.shape[2:]
        out = self.weight.data.reshape(self.out_channels, -1) @ self._cols(xp, ho, wo)
        out = out.reshape(self.out_channels, n, ho, wo)
        if self.bias is not None:
            out += self.bias.data[:, None, None, None]
        return out

    def backward(self, dout):
        xp = self._xp
        ho, wo = self._out_hw
        k, s, p = self.k, self.stride, self.padding
        c, n = xp.shape[:2]
        dmat = dout.reshape(self.out_channels, -1)
        cols = self._cols(xp, ho, wo)
        self.weight.accumulate((dmat @ cols.T).reshape(self.weight.shape))
        if self.bias is not None:
            self.bias.accumulate(dmat.sum(axis=1))
        dcols = (self.weight.data.reshape(self.out_channels, -1).T @ dmat).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
        h, w = self._in_hw
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class BatchNorm2d(Module):
    """Batch normalization over the ``(N, H, W)`` axes of a ``(C, N, H, W)`` map."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Tensor(np.ones(channels, dtype), name="weight")
        self.bias = Tensor(np.zeros(channels, dtype), name="bias")
        self.running_mean = Tensor(np.zeros(channels, dtype), requires_grad=False)
        self.running_var = Tensor(np.ones(channels, dtype), requires_grad=False)

    def forward(self, x):
        axes = (1, 2, 3)
        if self.training:
            mean = x.mean(axis=axes)
            var = ((x - mean[:, None, None, None]) ** 2).mean(axis=axes)
            m = x.size // x.shape[0]
            unbiased = var * m / max(m - 1, 1)
            mom = self.momentum
            self.running_mean.data = ((1 - mom) * self.running_mean.data + mom * mean).astype(x.dtype)
            self.running_var.data = ((1 - mom) * self.running_var.data + mom * unbiased).astype(x.dtype)
        else:
            mean, var = self.running_mean.data, self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None, None]) * inv_std[:, None, None, None]
        self._xhat, self._inv_std = xhat, inv_std
        return xhat * self.weight.data[:, None, None, None] + self.bias.data[:, None, None, None]

    def backward(self, dout):
        axes = (1, 2, 3)
        xhat, inv_std = self._xhat, self._inv_std
        self.weight.accumulate((dout * xhat).sum(axis=axes))
        self.bias.accumulate(dout.sum(axis=axes))
        dxhat = dout * self.weight.data[:, None, None, None]
        if not self.training:
            return dxhat * inv_std[:, None, None, None]
        mean_d = dxhat.mean(axis=axes)[:, None, None, None]
        mean_dx = (dxhat * xhat).mean(axis=axes)[:, None, None, None]
        return (dxhat - mean_d - xhat * mean_dx) * inv_std[:, None, None, None]


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, dout):
        return dout * self._mask


class Tanh(Module):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dout):
        return dout * (1 - self._y ** 2)


class Linear(Module):
    """``y = x @ W + b`` over the last axis; ``W`` has shape ``(in, out)``."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(he_uniform(rng, (in_features, out_features), in_features, dtype), name="weight")
        self.bias = Tensor(np.zeros(out_features, dtype), name="bias")

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got shape {x.shape}")
        self._x = x
        return x @ self.weight.data + self.bias.data

    def backward(self, dout):
        x2 = self._x.reshape(-1, self.in_features)
        d2 = dout.reshape(-1, self.out_features)
        self.weight.accumulate(x2.T @ d2)
        self.bias.accumulate(d2.sum(axis=0))
        return dout @ self.weight.data.T


class Dropout(Module):
    """Inverted dropout; identity in eval mode or when ``rate == 0``."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


def gap(feature_map) -> np.ndarray:
    """Per-channel mean over H x W of a ``(C, H, W)`` map."""
    fm = np.asarray(feature_map)
    if fm.ndim != 3:
        raise ShapeError(f"gap expects a (C, H, W) map, got shape {fm.shape}")
    return fm.mean(axis=(1, 2))


def _centered(x):
    """Deviations from the mean over the last two axes.

    Shifting by the first element before averaging keeps constant maps exactly
    zero, where a rounded mean would leave tiny residuals.
    """
    shifted = x - x[..., :1, :1]
    return shifted - shifted.mean(axis=(-2, -1), keepdims=True)


def gsp(feature_map) -> np.ndarray:
    """Per-channel population standard deviation over H x W of a ``(C, H, W)`` map."""
    fm = np.asarray(feature_map)
    if fm.ndim != 3:
        raise ShapeError(f"gsp expects a (C, H, W) map, got shape {fm.shape}")
    return np.sqrt((_centered(fm) ** 2).mean(axis=(1, 2)))


class StatsPool(Module):
    """Concatenated mean and standard-deviation pooling: ``(C, N, H, W) -> (N, 2C)``."""

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"StatsPool expects (C, N, H, W), got {x.shape}")
        mean = x.mean(axis=(2, 3))
        centered = _centered(x)
        std = np.sqrt((centered ** 2).mean(axis=(2, 3)))
        self._centered, self._std = centered, std
        return np.concatenate([mean, std]).T

    def backward(self, dout):
        c = self._std.shape[0]
        h, w = self._centered.shape[2:]
        dmean, dstd = dout[:, :c].T, dout[:, c:].T
        safe = np.where(self._std > 0, self._std, 1.0)
        coef = np.where(self._std > 0, dstd / (h * w * safe), 0.0)
        dx = coef[:, :, None, None] * self._centered
        dx += (dmean / (h * w))[:, :, None, None]
        return dx.astype(self._centered.dtype)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))
