"""Layers with explicit forward/backward passes (channels-last, NHWC).

Each layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into ``self.grads`` during ``backward``.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def channel_sum(x) -> np.ndarray:
    """Float64 sum over every axis but the last."""
    x2 = x.reshape(-1, x.shape[-1])
    return np.ones(x2.shape[0]) @ x2.astype(np.float64, copy=False)


def channel_mean(x) -> np.ndarray:
    return channel_sum(x) / (x.size // x.shape[-1])


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def config(self) -> dict:
        return {}

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    """3x3 (or any odd k) stride-1 convolution with same zero padding."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int = 3, *, rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        fan_in = k * k * c_in
        limit = np.sqrt(6.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.params["W"] = rng.uniform(-limit, limit, size=(k, k, c_in, c_out)).astype(dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        # the first layer never needs d(loss)/d(input)
        self.input_grad = True

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "k": self.k}

    def _cols(self, x):
        n, h, w, c = x.shape
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.concatenate(
            [xp[:, di:di + h, dj:dj + w, :] for di in range(self.k) for dj in range(self.k)], axis=3
        )
        return cols.reshape(n * h * w, self.k * self.k * c)

    def forward(self, x, train=False):
        n, h, w, _ = x.shape
        cols = self._cols(x)
        wm = self.params["W"].reshape(-1, self.c_out)
        out = cols @ wm + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(n, h, w, self.c_out)

    def backward(self, dout):
        shape, cols = self._cache
        n, h, w, c = shape
        d2 = dout.reshape(-1, self.c_out)
        self.grads["W"] = (cols.T @ d2).reshape(self.params["W"].shape)
        self.grads["b"] = channel_sum(d2).astype(d2.dtype)
        if not self.input_grad:
            return None
        # transposed convolution: correlate dout with the flipped kernel
        wt = self.params["W"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
        return (self._cols(dout) @ wt).reshape(n, h, w, c)


class BatchNorm(Layer):
    """Per-channel normalisation over every axis but the last.

    Train mode uses batch statistics (biased variance) and updates running
    statistics with momentum 0.9; eval mode uses the running statistics.
    """

    kind = "bn"

    def __init__(self, channels: int, *, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float64)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float64)

    def config(self):
        return {"channels": self.channels}

    def forward(self, x, train=False):
        if train:
            mean = channel_mean(x)
            var = channel_mean(np.square(x - mean.astype(x.dtype)))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= BN_MOMENTUM
            rm += (1 - BN_MOMENTUM) * mean
            rv *= BN_MOMENTUM
            rv += (1 - BN_MOMENTUM) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv
        self._cache = (xhat, inv, train)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dout):
        xhat, inv, train = self._cache
        self.grads["gamma"] = channel_sum(dout * xhat).astype(dout.dtype)
        self.grads["beta"] = channel_sum(dout).astype(dout.dtype)
        dxhat = dout * self.params["gamma"]
        if not train:
            return dxhat * inv
        m = channel_mean(dxhat).astype(dout.dtype)
        mx = channel_mean(dxhat * xhat).astype(dout.dtype)
        return inv * (dxhat - m - xhat * mx)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._cache


class MaxPool2D(Layer):
    """2x2, stride-2 max pooling; the gradient goes to the first maximum of each window."""

    kind = "maxpool"

    @staticmethod
    def _quads(x):
        return x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]

    def forward(self, x, train=False):
        a, b, c, d = self._quads(x)
        out = np.maximum(np.maximum(a, b), np.maximum(c, d))
        taken = a == out
        masks = [taken]
        for q in (b, c):
            m = (q == out) & ~taken
            taken = taken | m
            masks.append(m)
        masks.append(~taken)
        self._cache = (x.shape, masks)
        return out

    def backward(self, dout):
        shape, masks = self._cache
        dx = np.empty(shape, dtype=dout.dtype)
        for view, m in zip(self._quads(dx), masks):
            np.multiply(dout, m, out=view)
        return dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, *, rng=None, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        limit = np.sqrt(6.0 / n_in)
        rng = rng or np.random.default_rng(0)
        self.params["W"] = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}

    def forward(self, x, train=False):
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._cache
        self.grads["W"] = x.T @ dout
        self.grads["b"] = channel_sum(dout).astype(dout.dtype)
        return dout @ self.params["W"].T


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


PROB_CLAMP = 1e-7


def bce_loss(logits, labels):
    """Mean binary cross-entropy on sigmoid(logits), probabilities clamped to [1e-7, 1 - 1e-7].

    Returns ``(loss, dloss/dlogits)``; clamped probabilities pass no gradient.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    p = sigmoid(z)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = z.size
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)) / n
    dpc = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dz = np.where(inside, dpc * p * (1.0 - p), 0.0)
    return float(loss), dz


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, BatchNorm, ReLU, MaxPool2D, Flatten, Dense)}
