"""Parameterized layers. Each layer caches what its backward pass needs.

Layers follow a simple protocol: ``forward(x, train)`` returns the output and
remembers its inputs, ``backward(grad)`` returns the gradient w.r.t. the input
and accumulates parameter gradients into ``Tensor.grad``.
"""

from __future__ import annotations

import numpy as np

from . import functional as F


class Tensor:
    """An array with an optional gradient slot of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class BatchNorm:
    def __init__(self, channels: int, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        # freeze_stats keeps running stats untouched in train mode (gradient checks)
        self.freeze_stats = False
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train: bool):
        if train:
            y, cache, mean, var = F.batchnorm_train_forward(
                x, self.gamma.data, self.beta.data, self.eps
            )
            if not self.freeze_stats:
                m = self.momentum
                self.running_mean[...] = m * self.running_mean + (1 - m) * mean
                self.running_var[...] = m * self.running_var + (1 - m) * var
            self._cache = ("train", cache)
        else:
            y, scale = F.batchnorm_infer_forward(
                x, self.gamma.data, self.beta.data,
                self.running_mean, self.running_var, self.eps,
            )
            self._cache = ("infer", (x, scale))
        return y

    def backward(self, g):
        mode, cache = self._cache
        if mode == "train":
            gx, gg, gb = F.batchnorm_train_backward(g, cache, self.gamma.data)
        else:
            x, scale = cache
            xhat = (x - self.running_mean[None, :, None, None, None]) / np.sqrt(
                self.running_var + self.eps
            )[None, :, None, None, None]
            gg = np.sum(g * xhat, axis=(0, 2, 3, 4))
            gb = g.sum(axis=(0, 2, 3, 4))
            gx = g * scale[None, :, None, None, None]
        self.gamma.accumulate(gg)
        self.beta.accumulate(gb)
        self._cache = None
        return gx


class ConvBlock:
    """3x3x3 convolution (stride 1 or 2), batch norm, ReLU."""

    def __init__(self, in_ch, out_ch, stride=1, rng=None, dtype=np.float32,
                 bn_momentum=0.9, bn_eps=1e-5):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, 3, 3, 3), in_ch * 27, dtype))
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self.bn = BatchNorm(out_ch, bn_momentum, bn_eps, dtype)
        self._x = None
        self._pre_relu = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)] + [
            (f"bn.{n}", t) for n, t in self.bn.params()
        ]

    def buffers(self):
        return [(f"bn.{n}", b) for n, b in self.bn.buffers()]

    def forward(self, x, train: bool):
        self._x = x
        z = F.conv3d_forward(x, self.weight.data, self.bias.data, self.stride)
        z = self.bn.forward(z, train)
        self._pre_relu = z
        return F.relu_forward(z)

    def backward(self, g):
        g = F.relu_backward(g, self._pre_relu)
        g = self.bn.backward(g)
        gx, gw, gb = F.conv3d_backward(g, self._x, self.weight.data, self.stride)
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        self._x = self._pre_relu = None
        return gx


class UpBlock:
    """Stride-2 transposed 3x3x3 convolution, batch norm, ReLU."""

    def __init__(self, in_ch, out_ch, rng=None, dtype=np.float32,
                 bn_momentum=0.9, bn_eps=1e-5):
        rng = rng if rng is not None else np.random.default_rng(0)
        # each input voxel feeds 27 outputs, but only ~27/8 taps reach each
        # output voxel, so fan-in is in_ch * 27 / 8
        self.weight = Tensor(he_normal(rng, (in_ch, out_ch, 3, 3, 3), max(1, in_ch * 27 // 8), dtype))
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self.bn = BatchNorm(out_ch, bn_momentum, bn_eps, dtype)
        self._x = None
        self._pre_relu = None

    params = ConvBlock.params
    buffers = ConvBlock.buffers

    def forward(self, x, train: bool):
        self._x = x
        z = F.conv_transpose3d_forward(x, self.weight.data, self.bias.data, 2)
        z = self.bn.forward(z, train)
        self._pre_relu = z
        return F.relu_forward(z)

    def backward(self, g):
        g = F.relu_backward(g, self._pre_relu)
        g = self.bn.backward(g)
        gx, gw, gb = F.conv_transpose3d_backward(g, self._x, self.weight.data, 2)
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        self._x = self._pre_relu = None
        return gx


class PointwiseConv:
    """1x1x1 convolution used as the classifier head."""

    def __init__(self, in_ch, out_ch, dtype=np.float32):
        self.weight = Tensor(np.zeros((out_ch, in_ch), dtype=dtype))
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self._x = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []

    def forward(self, x, train: bool):
        self._x = x
        y = np.einsum("oc,ncdhw->nodhw", self.weight.data, x, optimize=True)
        return y + self.bias.data[None, :, None, None, None]

    def backward(self, g):
        self.weight.accumulate(np.einsum("nodhw,ncdhw->oc", g, self._x, optimize=True))
        self.bias.accumulate(g.sum(axis=(0, 2, 3, 4)))
        gx = np.einsum("oc,nodhw->ncdhw", self.weight.data, g, optimize=True)
        self._x = None
        return gx
