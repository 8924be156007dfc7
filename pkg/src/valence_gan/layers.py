"""Trainable layers and the Adam optimizer.

All discriminator convolutions use stride 2 with 'same' zero padding, so
four layers halve 128-pixel spectrograms down to 8. Transposed convolutions
double spatial dimensions and are exact adjoints of the forward convolution.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, GraphError
from .tensor import Tensor

INIT_STD = 0.02  # DCGAN-style normal init for all weights


def _init(rng, shape, dtype=np.float32, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv2D:
    """Stride-2 'same' convolution layer: [B,C,H,W] -> [B,F,H/2,W/2]."""

    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = 2
        self.weights = _init(rng, (out_channels, in_channels, kernel, kernel), dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        if x.shape[1] != self.in_channels:
            raise GraphError(
                f"Conv2D expects {self.in_channels} channels, got {x.shape[1]}")
        return x.conv2d(self.weights, self.bias)

    def parameters(self):
        return [("weights", self.weights), ("bias", self.bias)]


class TransposedConv2D:
    """Stride-2 transposed convolution layer: [B,C,H,W] -> [B,F,2H,2W]."""

    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = 2
        self.weights = _init(rng, (in_channels, out_channels, kernel, kernel), dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        if x.shape[1] != self.in_channels:
            raise GraphError(
                f"TransposedConv2D expects {self.in_channels} channels, got {x.shape[1]}")
        return x.conv2d_transpose(self.weights, self.bias)

    def parameters(self):
        return [("weights", self.weights), ("bias", self.bias)]


class Dense:
    """Fully connected layer: [B,in] -> [B,out]."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weights = _init(rng, (out_dim, in_dim), dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise GraphError(f"Dense expects {self.in_dim} inputs, got {x.shape[-1]}")
        return x.matmul(_transposed(self.weights)) + self.bias

    def parameters(self):
        return [("weights", self.weights), ("bias", self.bias)]


def _transposed(w):
    """Transpose a 2D weight tensor inside the graph."""
    out_data = w.data.T

    def backward(out):
        if w.requires_grad:
            w._accumulate(out.grad.T)

    return Tensor._from_op(out_data, (w,), "transpose", backward)


class BatchNorm2D:
    """Per-channel batch normalization over [B,C,H,W]."""

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x, train=True):
        if x.shape[1] != self.channels:
            raise GraphError(
                f"BatchNorm2D expects {self.channels} channels, got {x.shape[1]}")
        c = self.channels
        if train:
            if x.shape[0] < 2:
                raise ContractError("batchnorm in train mode requires batch >= 2")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            inv = (var + self.eps) ** -0.5
            xhat = centered * inv
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.data.reshape(c)
            self.running_var = m * self.running_var + (1 - m) * var.data.reshape(c)
        else:
            mean = self.running_mean.astype(x.dtype).reshape(1, c, 1, 1)
            inv = (self.running_var.astype(x.dtype) + self.eps) ** -0.5
            xhat = (x - Tensor(mean)) * Tensor(inv.reshape(1, c, 1, 1).astype(x.dtype))
        g = self.gamma.reshape(1, c, 1, 1)
        b = self.beta.reshape(1, c, 1, 1)
        return xhat * g + b

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class Adam:
    """Adam optimizer over a fixed list of named parameters.

    beta1=0.5 follows the DCGAN training recipe; the learning rate comes
    from the model configuration.
    """

    def __init__(self, named_params, lr, beta1=0.5, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        for name, p in self.named_params:
            if p.grad is None:
                raise ContractError(f"adam_step: parameter '{name}' has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, (_, p) in enumerate(self.named_params):
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None
