"""Dense float64 layers with hand-written backward passes, plus Adam.

Arrays are plain ``numpy.ndarray`` objects of dtype float64.  Every layer
caches what its backward pass needs during ``forward`` and *accumulates*
parameter gradients into ``layer.grads`` during ``backward``; call
``zero_grad`` between optimisation steps.

Image tensors use NCHW layout.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE, order="C")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable buffers to persist alongside parameters."""
        return {}

    def load_state(self, state: dict[str, np.ndarray]):
        pass

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.copy()


class Dense(Layer):
    """y = x W^T + b for input of shape (in,) or (N, in)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None, bias=True, scale=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            s = np.sqrt(2.0 / in_features) if scale is None else scale
            w = rng.normal(0.0, s, size=(out_features, in_features))
        self.params["W"] = as_tensor(w)
        if bias:
            self.params["b"] = np.zeros(out_features)
        self.zero_grad()

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_features:
            raise ShapeError(self.kind, ("N", self.in_features), x.shape)
        y = x @ self.params["W"].T
        if "b" in self.params:
            y = y + self.params["b"]
        self._cache = x
        return y

    def backward(self, grad_out):
        x = self._cached()
        g = as_tensor(grad_out)
        x2 = x.reshape(-1, self.in_features)
        g2 = g.reshape(-1, self.out_features)
        self._accumulate("W", g2.T @ x2)
        if "b" in self.params:
            self._accumulate("b", g2.sum(axis=0))
        return (g2 @ self.params["W"]).reshape(x.shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        x = as_tensor(x)
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_out):
        mask = self._cached()
        return np.where(mask, grad_out, 0.0)


class Conv2D(Layer):
    """2-D cross-correlation on NCHW input with zero padding.

    Uses an im2col formulation; ``cols`` has shape (N*Ho*Wo, C*k*k).  With
    ``input_grad=False`` (first layer of a network) backward only accumulates
    parameter gradients and returns None.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, rng=None,
                 input_grad=True):
        super().__init__()
        self.input_grad = input_grad
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        w = np.zeros(shape) if rng is None else rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.params["W"] = as_tensor(w)
        self.params["b"] = np.zeros(out_channels)
        self.zero_grad()

    def output_hw(self, h, w):
        k, s, p = self.k, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(self.kind, ("N", self.in_channels, "H", "W"), x.shape)
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = self.output_hw(h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(self.kind, ("N", c, f">={k - 2 * p}", f">={k - 2 * p}"), x.shape)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wm = self.params["W"].reshape(self.out_channels, -1)
        y = cols @ wm.T + self.params["b"]
        self._cache = (cols, x.shape, xp.shape, ho, wo)
        return np.ascontiguousarray(y.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad_out):
        cols, xshape, xpshape, ho, wo = self._cached()
        n, c, h, w = xshape
        k, s, p = self.k, self.stride, self.padding
        gm = as_tensor(grad_out).transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wm = self.params["W"].reshape(self.out_channels, -1)
        self._accumulate("W", (gm.T @ cols).reshape(self.params["W"].shape))
        self._accumulate("b", gm.sum(axis=0))
        if not self.input_grad:
            return None
        dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xpshape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dxp)


class BatchNorm(Layer):
    """Per-channel batch normalisation for (N, C) or (N, C, H, W) input."""

    kind = "batchnorm"

    def __init__(self, num_features, momentum=0.9, eps=1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.zero_grad()

    def _axes(self, x):
        if x.ndim == 2 and x.shape[1] == self.num_features:
            return (0,), (1, -1)
        if x.ndim == 4 and x.shape[1] == self.num_features:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(self.kind, ("N", self.num_features, "..."), x.shape)

    def forward(self, x):
        x = as_tensor(x)
        axes, bshape = self._axes(x)
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if self.training:
            m = x.size // self.num_features
            if m < 2:
                raise ShapeError(self.kind, ("N>=2 values per channel",), x.shape)
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            self._cache = ("train", xhat, inv_std, axes, bshape, m)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
            self._cache = ("eval", xhat, inv_std, axes, bshape, None)
        return gamma * xhat + beta

    def backward(self, grad_out):
        mode, xhat, inv_std, axes, bshape, m = self._cached()
        g = as_tensor(grad_out)
        self._accumulate("gamma", (g * xhat).sum(axis=axes))
        self._accumulate("beta", g.sum(axis=axes))
        dxhat = g * self.params["gamma"].reshape(bshape)
        if mode == "eval":
            return dxhat * inv_std.reshape(bshape)
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, state):
        self.running_mean = as_tensor(state["running_mean"]).copy()
        self.running_var = as_tensor(state["running_var"]).copy()


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) in train mode."""

    kind = "dropout"

    def __init__(self, p=0.3, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        x = as_tensor(x)
        if not self.training or self.p == 0.0:
            self._cache = None
            self._identity = True
            return x
        self._identity = False
        scale = np.where(self.rng.random(x.shape) >= self.p, 1.0 / (1.0 - self.p), 0.0)
        self._cache = scale
        return x * scale

    def backward(self, grad_out):
        if getattr(self, "_identity", None) is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        if self._identity:
            return as_tensor(grad_out)
        return grad_out * self._cache


class L2Normalize(Layer):
    """Scale each row (last axis) to unit Euclidean norm."""

    kind = "l2normalize"

    def forward(self, x):
        x = as_tensor(x)
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        zero = norm == 0.0
        if np.any(zero):
            warnings.warn("l2normalize: zero vector left unnormalised", RuntimeWarning, stacklevel=2)
        safe = np.where(zero, 1.0, norm)
        y = np.where(zero, 0.0, x / safe)
        self._cache = (y, safe, zero)
        return y

    def backward(self, grad_out):
        y, norm, zero = self._cached()
        g = as_tensor(grad_out)
        dx = (g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm
        return np.where(zero, 0.0, dx)


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4:
            raise ShapeError(self.kind, ("N", "C", "H", "W"), x.shape)
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out):
        shape = self._cached()
        n, c, h, w = shape
        return np.broadcast_to(grad_out[:, :, None, None] / (h * w), shape).copy()


class GlobalMaxPool(Layer):
    """Per-channel maximum over the spatial axes; the gradient goes to the first maximiser."""

    kind = "globalmaxpool"

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4:
            raise ShapeError(self.kind, ("N", "C", "H", "W"), x.shape)
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        idx = flat.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        shape, idx = self._cached()
        n, c, h, w = shape
        d = np.zeros((n, c, h * w))
        np.put_along_axis(d, idx[..., None], as_tensor(grad_out)[..., None], axis=-1)
        return d.reshape(shape)


class MaxPool(Layer):
    """Non-overlapping 2x2 max pooling; odd trailing rows/cols are dropped."""

    kind = "maxpool"

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[2] < self.size or x.shape[3] < self.size:
            raise ShapeError(self.kind, ("N", "C", f">={self.size}", f">={self.size}"), x.shape)
        n, c, h, w = x.shape
        s = self.size
        ho, wo = h // s, w // s
        xr = x[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(n, c, ho, wo, s * s)
        idx = xr.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        shape, idx = self._cached()
        n, c, h, w = shape
        s = self.size
        ho, wo = idx.shape[2], idx.shape[3]
        d = np.zeros((n, c, ho, wo, s * s))
        np.put_along_axis(d, idx[..., None], as_tensor(grad_out)[..., None], axis=-1)
        d = d.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        dx = np.zeros(shape)
        dx[:, :, :ho * s, :wo * s] = d
        return dx


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers=()):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def train(self):
        for layer in self.layers:
            layer.train()
        self.training = True
        return self

    def eval(self):
        for layer in self.layers:
            layer.eval()
        self.training = False
        return self

    def named_parameters(self, prefix=""):
        """Yield (name, param, grad_dict, key) for every trainable array."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                yield from layer.named_parameters(f"{prefix}{i}.")
            else:
                for key, p in layer.params.items():
                    yield f"{prefix}{i}.{key}", p, layer.grads, key

    def named_state(self, prefix=""):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                yield from layer.named_state(f"{prefix}{i}.")
            else:
                for key, v in layer.state().items():
                    yield f"{prefix}{i}.{key}", layer, key, v

    def num_parameters(self):
        return sum(p.size for _, p, _, _ in self.named_parameters())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``params`` and ``grads`` map names to arrays of identical shape.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError("adam", p.shape, g.shape, name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
