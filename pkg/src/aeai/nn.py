"""Layer abstractions and the Adam optimizer, assembled from autodiff ops.

A layer owns named parameter tensors plus any non-trainable state (batch
norm running averages). ``forward`` takes mode "train" or "eval"; eval-mode
forwards are pure functions of (parameters, running stats, input). Passing
``frozen=True`` runs the layer on detached parameter views so no gradient
reaches them — used when a discriminator scores generator outputs.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Layer",
    "Conv",
    "BatchNorm",
    "ConvBlock",
    "Dense",
    "Flatten",
    "Unflatten",
    "Upsample2x",
    "Stack",
    "Adam",
    "OptimizerError",
    "kaiming_uniform",
]


def kaiming_uniform(shape, fan_in, rng, dtype=np.float32, gain=math.sqrt(2.0)):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _activate(x, activation):
    if activation is None:
        return x
    if activation == "relu":
        return ad.relu(x)
    if activation == "sigmoid":
        return ad.sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")


def _param(t, frozen):
    return t.detach() if frozen else t


class Layer:
    """Base layer. Subclasses fill ``_params`` / ``_state`` dicts."""

    def __init__(self):
        self._params = {}
        self._state = {}

    def params(self):
        return dict(self._params)

    def state(self):
        return dict(self._state)

    def forward(self, x, mode="eval", frozen=False):
        raise NotImplementedError


class Conv(Layer):
    """3x3 (by default) convolution with bias and optional output activation."""

    def __init__(self, in_ch, out_ch, rng, ksize=3, padding=1, activation=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.ksize, self.padding = in_ch, out_ch, ksize, padding
        self.activation = activation
        self.weight = Tensor(
            kaiming_uniform((out_ch, in_ch, ksize, ksize), in_ch * ksize * ksize, rng, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self._params = {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode="eval", frozen=False):
        w, b = _param(self.weight, frozen), _param(self.bias, frozen)
        y = ad.conv2d(x, w, padding=self.padding)
        y = ad.add(y, ad.reshape(b, (self.out_ch, 1, 1)))
        return _activate(y, self.activation)


class BatchNorm(Layer):
    """Batch normalization (scale/shift learned) with optional activation."""

    def __init__(self, num_features, activation=None, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.activation = activation
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self._params = {"gamma": self.gamma, "beta": self.beta}
        self._state = {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode="eval", frozen=False):
        y = ad.batch_norm(
            x,
            _param(self.gamma, frozen),
            _param(self.beta, frozen),
            self.running_mean,
            self.running_var,
            training=(mode == "train"),
            eps=self.eps,
            momentum=self.momentum,
        )
        return _activate(y, self.activation)


class ConvBlock(Layer):
    """conv2d -> batch-norm -> relu, optionally followed by 2x2 max-pool."""

    def __init__(self, in_ch, out_ch, rng, pool=True, dtype=np.float32):
        super().__init__()
        self.pool = pool
        self.conv = Conv(in_ch, out_ch, rng, dtype=dtype)
        self.bn = BatchNorm(out_ch, activation="relu", dtype=dtype)

    def params(self):
        out = {f"conv.{k}": v for k, v in self.conv.params().items()}
        out.update({f"bn.{k}": v for k, v in self.bn.params().items()})
        return out

    def state(self):
        return {f"bn.{k}": v for k, v in self.bn.state().items()}

    def forward(self, x, mode="eval", frozen=False):
        y = self.conv.forward(x, mode, frozen)
        y = self.bn.forward(y, mode, frozen)
        if self.pool:
            y = ad.max_pool2(y)
        return y


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng, activation=None, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.weight = Tensor(kaiming_uniform((in_dim, out_dim), in_dim, rng, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self._params = {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode="eval", frozen=False):
        y = ad.add(ad.matmul(x, _param(self.weight, frozen)), _param(self.bias, frozen))
        return _activate(y, self.activation)


class Flatten(Layer):
    def forward(self, x, mode="eval", frozen=False):
        n = x.shape[0]
        return ad.reshape(x, (n, int(np.prod(x.shape[1:]))))


class Unflatten(Layer):
    def __init__(self, channels, height, width):
        super().__init__()
        self.target = (channels, height, width)

    def forward(self, x, mode="eval", frozen=False):
        return ad.reshape(x, (x.shape[0], *self.target))


class Upsample2x(Layer):
    def forward(self, x, mode="eval", frozen=False):
        return ad.upsample2x(x)


class Stack(Layer):
    """A named sequence of layers; parameter names are dotted paths."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def state(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.state().items():
                out[f"{i}.{k}"] = v
        return out

    def forward(self, x, mode="eval", frozen=False):
        for layer in self.layers:
            x = layer.forward(x, mode, frozen)
        return x


class OptimizerError(RuntimeError):
    """A parameter received a non-finite gradient; the step was aborted."""


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Reads each tensor's ``.grad`` (as left by the latest backward call)
    unless an explicit gradient dict is provided. A step with lr=0 is the
    identity on parameters; the step counter still advances.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads=None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name] if grads is not None else p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=p.dtype).reshape(p.shape)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
