"""Minimal float64 neural-net layers with explicit backward passes.

Layers follow one protocol: ``forward(x, train) -> (y, cache)`` computes
the output plus a cache for the matching ``backward(dy, cache) -> dx``
call, which also accumulates parameter gradients into ``layer.grads``.
Caches are returned rather than stored so one set of parameters can serve
several concurrent forward passes (needed by the mixed-batch losses that
backpropagate through three passes of the same extractor).

Everything runs in float64; with a fixed backend the whole stack is
bit-deterministic, which the rest of the toolkit relies on.
"""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from trida import kernels
from trida.errors import ValidationError


class Layer:
    """Base layer: holds ``params`` and matching ``grads`` dicts."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """3x3-style stride-1 convolution with symmetric zero padding."""

    def __init__(self, c_in: int, c_out: int, ksize: int, pad: int,
                 rng: np.random.Generator):
        super().__init__()
        self.ksize, self.pad = ksize, pad
        std = np.sqrt(2.0 / (c_in * ksize * ksize))
        self._register("weight", rng.standard_normal((c_out, c_in, ksize, ksize)) * std)
        self._register("bias", np.zeros(c_out))

    def forward(self, x, train):
        y = kernels.conv2d_forward(x, self.params["weight"], self.pad)
        y += self.params["bias"][None, :, None, None]
        return y, x

    def backward(self, dy, cache):
        x = cache
        self.grads["bias"] += dy.sum(axis=(0, 2, 3))
        self.grads["weight"] += kernels.conv2d_backward_weight(x, dy, self.ksize, self.pad)
        return kernels.conv2d_backward_input(dy, self.params["weight"], self.pad,
                                             x.shape[2], x.shape[3])


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        std = np.sqrt(2.0 / d_in)
        self._register("weight", rng.standard_normal((d_in, d_out)) * std)
        self._register("bias", np.zeros(d_out))

    def forward(self, x, train):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, dy, cache):
        x = cache
        self.grads["weight"] += x.T @ dy
        self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["weight"].T


class WeightNormLinear(Layer):
    """Linear layer with column-wise weight normalization (optional head)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        v = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
        self._register("v", v)
        self._register("g", np.linalg.norm(v, axis=0))
        self._register("bias", np.zeros(d_out))

    def _effective_weight(self):
        v = self.params["v"]
        norms = np.linalg.norm(v, axis=0)
        vhat = v / norms
        return self.params["g"] * vhat, vhat, norms

    def forward(self, x, train):
        w_eff, vhat, norms = self._effective_weight()
        return x @ w_eff + self.params["bias"], (x, vhat, norms)

    def backward(self, dy, cache):
        x, vhat, norms = cache
        g = self.params["g"]
        dw = x.T @ dy
        self.grads["bias"] += dy.sum(axis=0)
        dot = (dw * vhat).sum(axis=0)
        self.grads["g"] += dot
        self.grads["v"] += (g / norms) * (dw - vhat * dot)
        return dy @ (g * vhat).T


class _BatchNorm(Layer):
    """Shared batchnorm math; subclasses define the reduction axes."""

    axes: tuple[int, ...] = (0,)

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self._register("gamma", np.ones(dim))
        self._register("beta", np.zeros(dim))
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)

    def _shape(self, v: np.ndarray, x: np.ndarray) -> np.ndarray:
        shape = [1] * x.ndim
        shape[1 if x.ndim == 4 else -1] = v.size
        return v.reshape(shape)

    def batch_stats(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and biased variance of an input batch."""
        return x.mean(axis=self.axes), x.var(axis=self.axes)

    def forward(self, x, train):
        if train:
            mu, var = self.batch_stats(x)
            m = self.momentum
            self.buffers["running_mean"] *= 1.0 - m
            self.buffers["running_mean"] += m * mu
            self.buffers["running_var"] *= 1.0 - m
            self.buffers["running_var"] += m * var
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._shape(mu, x)) * self._shape(inv, x)
        y = xhat * self._shape(self.params["gamma"], x) + self._shape(self.params["beta"], x)
        return y, (x, xhat, mu, inv, train)

    def backward(self, dy, cache):
        x, xhat, mu, inv, train = cache
        g = self._shape(self.params["gamma"], x)
        self.grads["beta"] += dy.sum(axis=self.axes)
        self.grads["gamma"] += (dy * xhat).sum(axis=self.axes)
        dxhat = dy * g
        if not train:
            return dxhat * self._shape(inv, x)
        m = float(np.prod([x.shape[a] for a in self.axes]))
        xc = x - self._shape(mu, x)
        inv_b = self._shape(inv, x)
        dvar = (dxhat * xc).sum(axis=self.axes) * (-0.5) * inv ** 3
        dmu = (-(dxhat * inv_b).sum(axis=self.axes)
               - 2.0 * dvar * xc.sum(axis=self.axes) / m)
        return (dxhat * inv_b
                + self._shape(dvar, x) * 2.0 * xc / m
                + self._shape(dmu, x) / m)


class BatchNorm1d(_BatchNorm):
    axes = (0,)


class BatchNorm2d(_BatchNorm):
    axes = (0, 2, 3)


class ReLU(Layer):
    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache


class Tanh(Layer):
    def forward(self, x, train):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, cache):
        return dy * (1.0 - cache * cache)


class AvgPool2d(Layer):
    """2x2 average pooling; spatial dims must be even."""

    def forward(self, x, train):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValidationError(f"AvgPool2d needs even spatial dims, got {h}x{w}")
        y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return y, (h, w)

    def backward(self, dy, cache):
        h, w = cache
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


class Flatten(Layer):
    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache)


class Sequential:
    """Layer chain with cache-passing forward/backward."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray, train: bool):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        return x, caches

    def backward(self, dy: np.ndarray, caches: list,
                 input_taps: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Backpropagate ``dy``; ``input_taps[i]`` adds an extra gradient to
        the input of layer ``i`` (used by the feature-statistics regularizer).
        """
        for i in range(len(self.layers) - 1, -1, -1):
            dy = self.layers[i].backward(dy, caches[i])
            if input_taps and i in input_taps:
                dy = dy + input_taps[i]
        return dy

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{prefix}{i}.{name}", p, layer.grads[name]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                yield f"{prefix}{i}.{name}", b


def state_hash(arrays: list[np.ndarray]) -> str:
    """sha256 over the concatenated bytes of the given arrays."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class SGD:
    """SGD with momentum and weight decay over named learning-rate groups.

    ``groups`` maps a group name to a list of (param, grad) array pairs;
    ``base_lr`` maps the same names to learning rates.  ``step(decay)``
    uses ``lr = base_lr * decay`` so a schedule can rescale all groups
    uniformly.
    """

    def __init__(self, groups: dict[str, list[tuple[np.ndarray, np.ndarray]]],
                 base_lr: dict[str, float], momentum: float = 0.9,
                 weight_decay: float = 1e-3):
        for name in groups:
            if name not in base_lr:
                raise ValidationError(f"no learning rate for group {name!r}")
            if base_lr[name] <= 0:
                raise ValidationError(f"learning rate for {name!r} must be > 0")
        self.groups = groups
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {name: [np.zeros_like(p) for p, _ in pairs]
                          for name, pairs in groups.items()}

    def step(self, decay: float = 1.0) -> None:
        for name, pairs in self.groups.items():
            lr = self.base_lr[name] * decay
            for (p, g), v in zip(pairs, self._velocity[name]):
                v *= self.momentum
                v += g + self.weight_decay * p
                p -= lr * v
