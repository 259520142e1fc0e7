"""Differentiable operators of the backbone.

Convolution, batch normalization, leaky ReLU and max pooling, plus the two
composites they form: the conv block (conv -> batch norm -> leaky ReLU) and
the densely wired unit of three conv blocks.

Each layer caches whatever its backward pass needs during forward;
forward-then-backward is a strict sequence per layer instance.  Gradients
land on the layer (`gW`, `gb`, ...) the way the optimizer consumes them.
"""

from __future__ import annotations

import numpy as np


def out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


class Conv2D:
    """2-D convolution on (n, h, w, c) tensors, weights stored (kh, kw, c_in, c_out).

    Forward gathers one padded slice per kernel tap and accumulates GEMMs;
    same arithmetic as im2col but without materializing the full column
    buffer.  Bias is kept even where batch norm follows (redundant but
    harmless; initialized to zero).
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, pad=1, rng=None, init_std=0.01):
        if rng is None:
            self.W = np.zeros((kernel, kernel, c_in, c_out))
        else:
            self.W = rng.normal(0.0, init_std, size=(kernel, kernel, c_in, c_out))
        self.b = np.zeros(c_out)
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.gW = None
        self.gb = None
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c_in = x.shape
        if c_in != self.W.shape[2]:
            raise ValueError(f"input has {c_in} channels, weights expect {self.W.shape[2]}")
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = out_size(h, k, s, p), out_size(w, k, s, p)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        c_out = self.W.shape[3]
        out = np.empty((n, ho, wo, c_out))
        out[:] = self.b
        for u in range(k):
            for v in range(k):
                patch = xp[:, u : u + ho * s : s, v : v + wo * s : s, :]
                out += (patch.reshape(-1, c_in) @ self.W[u, v]).reshape(n, ho, wo, c_out)
        self._cache = (xp, x.shape, ho, wo)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xp, x_shape, ho, wo = self._cache
        n, h, w, c_in = x_shape
        if grad_out.shape != (n, ho, wo, self.W.shape[3]):
            raise ValueError(f"grad shape {grad_out.shape} does not match forward output")
        k, s, p = self.kernel, self.stride, self.pad
        g2 = grad_out.reshape(-1, self.W.shape[3])
        self.gb = g2.sum(axis=0)
        self.gW = np.empty_like(self.W)
        grad_xp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                patch = xp[:, u : u + ho * s : s, v : v + wo * s : s, :].reshape(-1, c_in)
                self.gW[u, v] = patch.T @ g2
                grad_xp[:, u : u + ho * s : s, v : v + wo * s : s, :] += (
                    g2 @ self.W[u, v].T
                ).reshape(n, ho, wo, c_in)
        return grad_xp[:, p : p + h, p : p + w, :].copy()

    def params(self):
        return [("W", self.W), ("b", self.b)]

    def grads(self):
        return [("W", self.gW), ("b", self.gb)]


class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes by the biased batch moments over (n, h, w) and
    updates the running stats; eval mode normalizes by the running stats.
    epsilon 1e-5, running-stat momentum 0.1.
    """

    def __init__(self, c, eps=1e-5, momentum=0.1):
        self.gamma = np.ones(c)
        self.beta = np.zeros(c)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.eps = eps
        self.momentum = momentum
        self.ggamma = None
        self.gbeta = None
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[3] != self.gamma.size:
            raise ValueError(f"input has {x.shape[3]} channels, params expect {self.gamma.size}")
        if x.size == 0:
            raise ValueError("zero-size batch")
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))  # biased, matching the backward pass
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, train, x.shape)
        return self.gamma * xhat + self.beta

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat, inv, train, x_shape = self._cache
        if grad_out.shape != x_shape:
            raise ValueError("grad shape does not match forward input")
        self.gbeta = grad_out.sum(axis=(0, 1, 2))
        self.ggamma = (grad_out * xhat).sum(axis=(0, 1, 2))
        if not train:
            return grad_out * (self.gamma * inv)
        m = x_shape[0] * x_shape[1] * x_shape[2]
        return (self.gamma * inv / m) * (m * grad_out - self.gbeta - xhat * self.ggamma)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def grads(self):
        return [("gamma", self.ggamma), ("beta", self.gbeta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class LeakyReLU:
    """x if x > 0 else slope * x; the subgradient at exactly 0 is `slope`."""

    def __init__(self, slope):
        if slope < 0:
            raise ValueError("slope must be >= 0")
        self.slope = slope
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = np.where(x > 0, 1.0, self.slope)
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class MaxPool2D:
    """Max pooling (default 3x3 window, stride 2, pad 1 -> exact halving).

    Padding cells never win the max, so every output is the max over the
    real cells its window covers and the routed gradient mass always equals
    the incoming mass.  Ties are broken by scan order within the window
    (lowest y, then lowest x), which makes backward deterministic.
    """

    def __init__(self, kernel=3, stride=2, pad=1):
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = out_size(h, k, s, p), out_size(w, k, s, p)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-np.inf)
        cand = np.stack(
            [
                xp[:, u : u + ho * s : s, v : v + wo * s : s, :]
                for u in range(k)
                for v in range(k)
            ],
            axis=-1,
        )  # (n, ho, wo, c, k*k), scan order y-major
        argmax = cand.argmax(axis=-1)  # first max wins ties
        out = np.take_along_axis(cand, argmax[..., None], axis=-1)[..., 0]
        self._cache = (argmax, x.shape, ho, wo)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        argmax, x_shape, ho, wo = self._cache
        n, h, w, c = x_shape
        k, s, p = self.kernel, self.stride, self.pad
        if grad_out.shape != (n, ho, wo, c):
            raise ValueError("grad shape does not match forward output")
        grad_xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for t in range(k * k):
            u, v = divmod(t, k)
            grad_xp[:, u : u + ho * s : s, v : v + wo * s : s, :] += grad_out * (argmax == t)
        return grad_xp[:, p : p + h, p : p + w, :].copy()


class ConvBlock:
    """conv -> batch norm -> leaky ReLU, the atomic unit of the backbone."""

    def __init__(self, c_in, c_out, slope, kernel=3, stride=1, pad=1, rng=None, init_std=0.01):
        self.conv = Conv2D(c_in, c_out, kernel, stride, pad, rng=rng, init_std=init_std)
        self.bn = BatchNorm(c_out)
        self.act = LeakyReLU(slope)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        return self.act.forward(self.bn.forward(self.conv.forward(x), train))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.bn.backward(self.act.backward(grad_out)))

    def params(self):
        return [("conv." + n, p) for n, p in self.conv.params()] + [
            ("bn." + n, p) for n, p in self.bn.params()
        ]

    def grads(self):
        return [("conv." + n, g) for n, g in self.conv.grads()] + [
            ("bn." + n, g) for n, g in self.bn.grads()
        ]

    def state(self):
        return [("bn." + n, s) for n, s in self.bn.state()]


class DenseUnit:
    """Three conv blocks densely wired through two channel concatenations.

        y1  = block_a(x)
        y2  = block_b(concat(x, y1))
        out = block_c(concat(x, y1, y2))

    Internal blocks a and b produce the unit's declared channel count, so
    block_c sees c_in + 2*c_out channels; spatial size is preserved
    throughout.  Backward accumulates gradients through both concat
    fan-outs (x feeds all three blocks).
    """

    def __init__(self, c_in, c_out, slope, rng=None, init_std=0.01):
        self.c_in = c_in
        self.c_out = c_out
        self.block_a = ConvBlock(c_in, c_out, slope, rng=rng, init_std=init_std)
        self.block_b = ConvBlock(c_in + c_out, c_out, slope, rng=rng, init_std=init_std)
        self.block_c = ConvBlock(c_in + 2 * c_out, c_out, slope, rng=rng, init_std=init_std)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        y1 = self.block_a.forward(x, train)
        y2 = self.block_b.forward(np.concatenate([x, y1], axis=3), train)
        return self.block_c.forward(np.concatenate([x, y1, y2], axis=3), train)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        ci, co = self.c_in, self.c_out
        g_cat2 = self.block_c.backward(grad_out)
        gx_2, gy1_2, gy2 = (
            g_cat2[..., :ci],
            g_cat2[..., ci : ci + co],
            g_cat2[..., ci + co :],
        )
        g_cat1 = self.block_b.backward(gy2)
        gx_1, gy1_1 = g_cat1[..., :ci], g_cat1[..., ci:]
        gx_0 = self.block_a.backward(gy1_1 + gy1_2)
        return gx_0 + gx_1 + gx_2

    def _sub(self):
        return [("a", self.block_a), ("b", self.block_b), ("c", self.block_c)]

    def params(self):
        return [(f"{tag}.{n}", p) for tag, blk in self._sub() for n, p in blk.params()]

    def grads(self):
        return [(f"{tag}.{n}", g) for tag, blk in self._sub() for n, g in blk.grads()]

    def state(self):
        return [(f"{tag}.{n}", s) for tag, blk in self._sub() for n, s in blk.state()]
