"""Neural network layers with explicit forward/backward passes.

Each layer owns views into the model's flat parameter vector. ``forward``
returns the output plus an opaque cache; ``backward`` consumes that cache and
returns the input gradient plus per-parameter gradients keyed by name.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError


class Dense:
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    def param_layout(self):
        return [
            ("W", (self.in_features, self.out_features), True),
            ("b", (self.out_features,), False),
        ]

    def bind(self, views):
        self.W = views["W"]
        self.b = views["b"]

    def init_params(self, rng):
        scale = math.sqrt(2.0 / self.in_features)
        self.W[...] = (rng.standard_normal(self.W.shape) * scale).astype(self.W.dtype)
        self.b[...] = 0.0

    def forward(self, x, train):
        return x @ self.W + self.b, x

    def backward(self, dy, cache):
        x = cache
        return dy @ self.W.T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


class ReLU:
    name = "relu"

    def param_layout(self):
        return []

    def bind(self, views):
        pass

    def forward(self, x, train):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, cache):
        return dy * cache, {}


class Flatten:
    name = "flatten"

    def param_layout(self):
        return []

    def bind(self, views):
        pass

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Reshape:
    """Reshapes flat feature rows into (C, H, W) images for conv stacks."""

    name = "reshape"

    def __init__(self, image_shape: tuple[int, int, int]):
        self.image_shape = tuple(image_shape)

    def param_layout(self):
        return []

    def bind(self, views):
        pass

    def forward(self, x, train):
        want = math.prod(self.image_shape)
        if x.shape[1] != want:
            raise ShapeError(
                f"expected {want} features for image shape {self.image_shape}, got {x.shape[1]}"
            )
        return x.reshape(x.shape[0], *self.image_shape), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Conv2d:
    """3x3 convolution, stride 1, symmetric zero padding."""

    def __init__(self, name, in_channels, out_channels, kernel=3, pad=1):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = pad

    def param_layout(self):
        k = self.kernel
        return [
            ("W", (self.out_channels, self.in_channels, k, k), True),
            ("b", (self.out_channels,), False),
        ]

    def bind(self, views):
        self.W = views["W"]
        self.b = views["b"]

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        scale = math.sqrt(2.0 / fan_in)
        self.W[...] = (rng.standard_normal(self.W.shape) * scale).astype(self.W.dtype)
        self.b[...] = 0.0

    def forward(self, x, train):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        k, p = self.kernel, self.pad
        oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + oh, j : j + ow]
        cols_mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)
        wm = self.W.reshape(self.out_channels, -1)
        y = cols_mat @ wm.T + self.b
        y = y.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return y, (cols_mat, x.shape)

    def backward(self, dy, cache):
        cols_mat, x_shape = cache
        n, c, h, w = x_shape
        k, p = self.kernel, self.pad
        _, co, oh, ow = dy.shape
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        dW = (dy_mat.T @ cols_mat).reshape(self.W.shape)
        db = dy_mat.sum(axis=0)
        dcols = dy_mat @ self.W.reshape(co, -1)
        dcols = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
        dx = dxp[:, :, p : p + h, p : p + w]
        return dx, {"W": dW, "b": db}


class MaxPool2:
    """2x2 max pooling with stride 2; ties route to the first window slot."""

    name = "pool"

    def param_layout(self):
        return []

    def bind(self, views):
        pass

    def forward(self, x, train):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError("max pooling requires even spatial dimensions")
        ho, wo = h // 2, w // 2
        win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache):
        idx, x_shape = cache
        n, c, h, w = x_shape
        ho, wo = h // 2, w // 2
        dwin = np.zeros((n, c, ho, wo, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)
        return dx, {}


def _channel_shape(x_ndim: int, channels: int) -> tuple[int, ...]:
    # broadcastable shape for per-channel parameters: (1, C) or (1, C, 1, 1)
    return (1, channels) + (1,) * (x_ndim - 2)


class BatchNorm:
    """Normalizes each channel over the minibatch.

    Training uses the minibatch mean/variance and updates running estimates
    with an exponential moving average; evaluation uses the running estimates.
    """

    def __init__(self, name, channels, momentum=0.9, eps=1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = None
        self.running_var = None

    def param_layout(self):
        return [("gamma", (self.channels,), False), ("beta", (self.channels,), False)]

    def bind(self, views):
        self.gamma = views["gamma"]
        self.beta = views["beta"]
        dtype = self.gamma.dtype
        self.running_mean = np.zeros(self.channels, dtype=dtype)
        self.running_var = np.ones(self.channels, dtype=dtype)

    def init_params(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def state_arrays(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels")
        axes = (0,) + tuple(range(2, x.ndim))
        pshape = _channel_shape(x.ndim, self.channels)
        gamma = self.gamma.reshape(pshape)
        beta = self.beta.reshape(pshape)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1.0 - m) * mu
            self.running_var[...] = m * self.running_var + (1.0 - m) * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var.reshape(pshape) + self.eps)
        xhat = (x - mu.reshape(pshape)) * inv_std
        return gamma * xhat + beta, (xhat, inv_std, axes, train)

    def backward(self, dy, cache):
        xhat, inv_std, axes, train = cache
        pshape = _channel_shape(dy.ndim, self.channels)
        gamma = self.gamma.reshape(pshape)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * gamma
        if train:
            m = math.prod(dy.shape[i] for i in axes)
            dx = (
                inv_std
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            dx = dxhat * inv_std
        return dx, {"gamma": dgamma, "beta": dbeta}


class GroupNorm:
    """Normalizes groups of adjacent channels within each sample.

    Statistics never cross the batch axis, so the output for a sample does
    not depend on what else shares its minibatch.
    """

    def __init__(self, name, channels, group_size=2, eps=1e-5):
        if channels % group_size:
            raise ShapeError(
                f"{name}: {channels} channels not divisible by group size {group_size}"
            )
        self.name = name
        self.channels = channels
        self.group_size = group_size
        self.groups = channels // group_size
        self.eps = eps

    def param_layout(self):
        return [("gamma", (self.channels,), False), ("beta", (self.channels,), False)]

    def bind(self, views):
        self.gamma = views["gamma"]
        self.beta = views["beta"]

    def init_params(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0

    def forward(self, x, train):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels")
        n = x.shape[0]
        spatial = x.shape[2:]
        xg = x.reshape(n, self.groups, self.group_size, *spatial)
        axes = tuple(range(2, xg.ndim))
        mu = xg.mean(axis=axes, keepdims=True)
        var = xg.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat_g = (xg - mu) * inv_std
        xhat = xhat_g.reshape(x.shape)
        pshape = _channel_shape(x.ndim, self.channels)
        y = self.gamma.reshape(pshape) * xhat + self.beta.reshape(pshape)
        return y, (xhat, inv_std, axes)

    def backward(self, dy, cache):
        xhat, inv_std, axes = cache
        n = dy.shape[0]
        spatial = dy.shape[2:]
        pshape = _channel_shape(dy.ndim, self.channels)
        red = (0,) + tuple(range(2, dy.ndim))
        dgamma = (dy * xhat).sum(axis=red)
        dbeta = dy.sum(axis=red)
        dxhat = dy * self.gamma.reshape(pshape)
        dxhat_g = dxhat.reshape(n, self.groups, self.group_size, *spatial)
        xhat_g = xhat.reshape(n, self.groups, self.group_size, *spatial)
        m = math.prod(xhat_g.shape[i] for i in axes)
        dx_g = (
            inv_std
            / m
            * (
                m * dxhat_g
                - dxhat_g.sum(axis=axes, keepdims=True)
                - xhat_g * (dxhat_g * xhat_g).sum(axis=axes, keepdims=True)
            )
        )
        return dx_g.reshape(dy.shape), {"gamma": dgamma, "beta": dbeta}
