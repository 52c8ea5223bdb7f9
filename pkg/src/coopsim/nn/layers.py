"""Layer kernels: convolution, batch norm, leaky ReLU, max pooling.

All activations are (height, width, channels) float64 arrays. Layers are
stateless between calls: forward returns (output, cache) and backward takes
the cache back, so one set of weights can serve several forward passes (the
cooperative training path runs the encoder twice per sample). Parameter
gradients accumulate into .grads until zero_grad().
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["ShapeError", "Layer", "Conv2D", "BatchNorm", "LeakyReLU", "MaxPool2"]


class ShapeError(ValueError):
    """Input tensor does not fit the layer."""


def _check_image(x: np.ndarray) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected a (h, w, c) tensor, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"empty spatial extent in shape {x.shape}")


class Layer:
    """Common interface. Subclasses fill in forward/backward."""

    kind = "layer"

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache):
        raise NotImplementedError

    def params(self):
        """(name, value, grad) triples; grads alias persistent arrays."""
        return []

    def zero_grad(self) -> None:
        for _name, _value, grad in self.params():
            grad[...] = 0.0


class Conv2D(Layer):
    """Same-padding stride-1 convolution, square kernel of odd size.

    Implemented as im2col + one matmul; backward scatters the column
    gradient back through the k*k taps.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        if kernel % 2 != 1 or kernel < 1:
            raise ValueError(f"kernel must be odd and positive, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.kind = f"conv{kernel}x{kernel}"
        self.weight = np.zeros((kernel, kernel, in_channels, out_channels))
        self.bias = np.zeros(out_channels)
        self.weight_grad = np.zeros_like(self.weight)
        self.bias_grad = np.zeros_like(self.bias)

    def init_weights(self, rng: np.random.Generator) -> None:
        fan_in = self.kernel * self.kernel * self.in_channels
        self.weight[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.weight.shape)
        self.bias[...] = 0.0

    def params(self):
        return [
            ("weight", self.weight, self.weight_grad),
            ("bias", self.bias, self.bias_grad),
        ]

    def forward(self, x: np.ndarray, train: bool):
        _check_image(x)
        if x.shape[2] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {x.shape[2]}"
            )
        h, w, _ = x.shape
        k = self.kernel
        pad = (k - 1) // 2
        if pad:
            xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        else:
            xp = x
        # (h, w, c, k, k) windows -> (h*w, k*k*c) columns
        win = sliding_window_view(xp, (k, k), axis=(0, 1))
        cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * self.in_channels)
        wmat = self.weight.reshape(k * k * self.in_channels, self.out_channels)
        y = cols @ wmat + self.bias
        return y.reshape(h, w, self.out_channels), (cols, x.shape)

    def backward(self, dy: np.ndarray, cache):
        cols, x_shape = cache
        h, w, _ = x_shape
        k = self.kernel
        pad = (k - 1) // 2
        dy_flat = dy.reshape(h * w, self.out_channels)
        wmat = self.weight.reshape(k * k * self.in_channels, self.out_channels)
        self.weight_grad += (cols.T @ dy_flat).reshape(self.weight.shape)
        self.bias_grad += dy_flat.sum(axis=0)
        dcols = (dy_flat @ wmat.T).reshape(h, w, k, k, self.in_channels)
        dxp = np.zeros((h + 2 * pad, w + 2 * pad, self.in_channels))
        for ki in range(k):
            for kj in range(k):
                dxp[ki : ki + h, kj : kj + w, :] += dcols[:, :, ki, kj, :]
        if pad:
            return dxp[pad : pad + h, pad : pad + w, :]
        return dxp


class BatchNorm(Layer):
    """Per-channel normalization over the spatial extent.

    Train mode normalizes with batch statistics and updates the running
    estimates with the given momentum; eval mode uses the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.gamma_grad = np.zeros(channels)
        self.beta_grad = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return [
            ("gamma", self.gamma, self.gamma_grad),
            ("beta", self.beta, self.beta_grad),
        ]

    def forward(self, x: np.ndarray, train: bool):
        _check_image(x)
        if x.shape[2] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[2]}")
        if train:
            mean = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        y = self.gamma * xhat + self.beta
        return y, (xhat, inv_std, train)

    def backward(self, dy: np.ndarray, cache):
        xhat, inv_std, train = cache
        self.gamma_grad += (dy * xhat).sum(axis=(0, 1))
        self.beta_grad += dy.sum(axis=(0, 1))
        if not train:
            return dy * self.gamma * inv_std
        # batch statistics were functions of x, so their gradients feed back
        dmean = dy.mean(axis=(0, 1))
        dproj = (dy * xhat).mean(axis=(0, 1))
        return self.gamma * inv_std * (dy - dmean - xhat * dproj)


class LeakyReLU(Layer):
    kind = "leakyrelu"

    def __init__(self, slope: float = 0.1):
        self.slope = slope

    def forward(self, x: np.ndarray, train: bool):
        _check_image(x)
        pos = x > 0.0
        y = np.where(pos, x, self.slope * x)
        return y, pos

    def backward(self, dy: np.ndarray, cache):
        pos = cache
        return np.where(pos, dy, self.slope * dy)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Requires even spatial dims."""

    kind = "maxpool2"

    def forward(self, x: np.ndarray, train: bool):
        _check_image(x)
        h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"pooling needs even spatial dims, got {h}x{w}")
        # (h/2, w/2, 4, c) window view; argmax ties go to the first (top-left)
        xr = (
            x.reshape(h // 2, 2, w // 2, 2, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(h // 2, w // 2, 4, c)
        )
        idx = xr.argmax(axis=2)
        y = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return y, (idx, x.shape)

    def backward(self, dy: np.ndarray, cache):
        idx, x_shape = cache
        h, w, c = x_shape
        dxr = np.zeros((h // 2, w // 2, 4, c))
        np.put_along_axis(dxr, idx[:, :, None, :], dy[:, :, None, :], axis=2)
        return (
            dxr.reshape(h // 2, w // 2, 2, 2, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(h, w, c)
        )
