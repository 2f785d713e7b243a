"""Layer forward/backward kernels for the 3D CNN.

Activations are numpy arrays in channels-last layout (batch, x, y, z, ch); the
channels-last GEMM orientation is roughly twice as fast as channels-first on
this BLAS.  Convolutions are 3x3x3, stride 1, zero-padded "same", computed as
im2col + one matrix product.  Every layer caches what its backward pass needs
in a per-call dict so a single parameter set can serve concurrent forwards.
"""

from __future__ import annotations

import numpy as np


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d:
    """3x3x3 convolution; weight shape (3, 3, 3, in_ch, out_ch), bias (out_ch,)."""

    def __init__(self, name: str, in_ch: int, out_ch: int):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch

    def param_shapes(self):
        return {f"{self.name}.w": (3, 3, 3, self.in_ch, self.out_ch),
                f"{self.name}.b": (self.out_ch,)}

    def init(self, rng, params, dtype):
        fan_in = 27 * self.in_ch
        params[f"{self.name}.w"] = he_normal(rng, (3, 3, 3, self.in_ch, self.out_ch), fan_in, dtype)
        params[f"{self.name}.b"] = np.zeros(self.out_ch, dtype)

    @staticmethod
    def _pad(x):
        b, xx, yy, zz, c = x.shape
        xp = np.zeros((b, xx + 2, yy + 2, zz + 2, c), x.dtype)
        xp[:, 1:-1, 1:-1, 1:-1, :] = x
        return xp

    @staticmethod
    def _im2col(xp, dims):
        b, xx, yy, zz = dims
        c = xp.shape[-1]
        cols = np.empty((b, xx, yy, zz, 27 * c), xp.dtype)
        i = 0
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    cols[..., i * c:(i + 1) * c] = xp[:, dx:dx + xx, dy:dy + yy, dz:dz + zz, :]
                    i += 1
        return cols.reshape(b * xx * yy * zz, 27 * c)

    def forward(self, x, params, mode, rng, cache):
        if x.shape[-1] != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} channels, got {x.shape[-1]}")
        b, xx, yy, zz, _ = x.shape
        w = params[f"{self.name}.w"].reshape(27 * self.in_ch, self.out_ch)
        xp = self._pad(x)
        out = self._im2col(xp, (b, xx, yy, zz)) @ w + params[f"{self.name}.b"]
        cache[self.name] = (xp, (b, xx, yy, zz))
        return out.reshape(b, xx, yy, zz, self.out_ch)

    def backward(self, dy, params, cache, grads):
        xp, dims = cache[self.name]
        b, xx, yy, zz = dims
        w = params[f"{self.name}.w"].reshape(27 * self.in_ch, self.out_ch)
        dym = dy.reshape(-1, self.out_ch)
        cols = self._im2col(xp, dims)  # rebuilt instead of cached: trades bandwidth for memory
        grads[f"{self.name}.w"] = (cols.T @ dym).reshape(3, 3, 3, self.in_ch, self.out_ch)
        grads[f"{self.name}.b"] = dym.sum(axis=0)
        dcols = (dym @ w.T).reshape(b, xx, yy, zz, 27 * self.in_ch)
        dxp = np.zeros_like(xp)
        i = 0
        c = self.in_ch
        for dx in range(3):
            for dy_ in range(3):
                for dz in range(3):
                    dxp[:, dx:dx + xx, dy_:dy_ + yy, dz:dz + zz, :] += dcols[..., i * c:(i + 1) * c]
                    i += 1
        return dxp[:, 1:-1, 1:-1, 1:-1, :]


class MaxPool3d:
    """Non-overlapping max pooling; spatial extents must divide evenly."""

    def __init__(self, name: str, pool: tuple[int, int, int]):
        self.name = name
        self.pool = pool

    def param_shapes(self):
        return {}

    def init(self, rng, params, dtype):
        pass

    def forward(self, x, params, mode, rng, cache):
        b, xx, yy, zz, c = x.shape
        px, py, pz = self.pool
        if xx % px or yy % py or zz % pz:
            raise ValueError(f"{self.name}: extents {(xx, yy, zz)} not divisible by pool {self.pool}")
        xo, yo, zo = xx // px, yy // py, zz // pz
        v = x.reshape(b, xo, px, yo, py, zo, pz, c)
        v = v.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, xo, yo, zo, px * py * pz, c)
        # argmax takes the first maximum, i.e. the lowest (dx, dy, dz) offset
        idx = v.argmax(axis=4)
        out = np.take_along_axis(v, idx[:, :, :, :, None, :], axis=4)[:, :, :, :, 0, :]
        cache[self.name] = (idx, (b, xx, yy, zz, c))
        return out

    def backward(self, dy, params, cache, grads):
        idx, (b, xx, yy, zz, c) = cache[self.name]
        px, py, pz = self.pool
        xo, yo, zo = xx // px, yy // py, zz // pz
        dv = np.zeros((b, xo, yo, zo, px * py * pz, c), dy.dtype)
        np.put_along_axis(dv, idx[:, :, :, :, None, :], dy[:, :, :, :, None, :], axis=4)
        dv = dv.reshape(b, xo, yo, zo, px, py, pz, c).transpose(0, 1, 4, 2, 5, 3, 6, 7)
        return dv.reshape(b, xx, yy, zz, c)


class BatchNorm:
    """Per-channel batch normalization (momentum 0.99, eps 1e-5).

    Train mode normalizes by batch statistics and refreshes the running stats
    stored alongside the parameters; infer mode applies the running stats.
    """

    MOMENTUM = 0.99
    EPS = 1e-5

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels

    def param_shapes(self):
        n = (self.channels,)
        return {f"{self.name}.gamma": n, f"{self.name}.beta": n,
                f"{self.name}.running_mean": n, f"{self.name}.running_var": n}

    def grad_free_params(self):
        return (f"{self.name}.running_mean", f"{self.name}.running_var")

    def init(self, rng, params, dtype):
        params[f"{self.name}.gamma"] = np.ones(self.channels, dtype)
        params[f"{self.name}.beta"] = np.zeros(self.channels, dtype)
        params[f"{self.name}.running_mean"] = np.zeros(self.channels, dtype)
        params[f"{self.name}.running_var"] = np.ones(self.channels, dtype)

    def forward(self, x, params, mode, rng, cache):
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        if mode == "train":
            axes = tuple(range(x.ndim - 1))
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + x.dtype.type(self.EPS))
            xhat = (x - mu) * inv
            m = self.MOMENTUM
            params[f"{self.name}.running_mean"] = (
                m * params[f"{self.name}.running_mean"] + (1 - m) * mu).astype(x.dtype)
            params[f"{self.name}.running_var"] = (
                m * params[f"{self.name}.running_var"] + (1 - m) * var).astype(x.dtype)
            cache[self.name] = (xhat, inv)
            return gamma * xhat + beta
        inv = 1.0 / np.sqrt(params[f"{self.name}.running_var"] + x.dtype.type(self.EPS))
        scale = gamma * inv
        shift = beta - params[f"{self.name}.running_mean"] * scale
        return x * scale + shift

    def backward(self, dy, params, cache, grads):
        xhat, inv = cache[self.name]
        axes = tuple(range(dy.ndim - 1))
        n = dy.size // dy.shape[-1]
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        grads[f"{self.name}.gamma"] = dgamma
        grads[f"{self.name}.beta"] = dbeta
        dxhat = dy * params[f"{self.name}.gamma"]
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes)
                          - xhat * (dxhat * xhat).sum(axis=axes))
        return dx.astype(dy.dtype)


class Relu:
    def __init__(self, name: str):
        self.name = name

    def param_shapes(self):
        return {}

    def init(self, rng, params, dtype):
        pass

    def forward(self, x, params, mode, rng, cache):
        mask = x > 0
        cache[self.name] = mask
        return np.where(mask, x, x.dtype.type(0))

    def backward(self, dy, params, cache, grads):
        return np.where(cache[self.name], dy, dy.dtype.type(0))


class Sigmoid:
    def __init__(self, name: str):
        self.name = name

    def param_shapes(self):
        return {}

    def init(self, rng, params, dtype):
        pass

    def forward(self, x, params, mode, rng, cache):
        # clip keeps exp() in range; the sigmoid is saturated there anyway
        y = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
        cache[self.name] = y
        return y.astype(x.dtype)

    def backward(self, dy, params, cache, grads):
        y = cache[self.name]
        return (dy * y * (1.0 - y)).astype(dy.dtype)


class Dropout:
    """Inverted dropout: activations are scaled by 1/keep at train time."""

    def __init__(self, name: str, rate: float):
        self.name = name
        self.rate = rate

    def param_shapes(self):
        return {}

    def init(self, rng, params, dtype):
        pass

    def forward(self, x, params, mode, rng, cache):
        if mode != "train" or self.rate <= 0.0:
            return x
        if rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep)
        cache[self.name] = mask
        return np.where(mask, x / x.dtype.type(keep), x.dtype.type(0))

    def backward(self, dy, params, cache, grads):
        mask = cache.get(self.name)
        if mask is None:
            return dy
        keep = 1.0 - self.rate
        return np.where(mask, dy / dy.dtype.type(keep), dy.dtype.type(0))


class Flatten:
    def __init__(self, name: str):
        self.name = name

    def param_shapes(self):
        return {}

    def init(self, rng, params, dtype):
        pass

    def forward(self, x, params, mode, rng, cache):
        cache[self.name] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, params, cache, grads):
        return dy.reshape(cache[self.name])


class Dense:
    """Fully connected layer; weight shape (in_features, units)."""

    def __init__(self, name: str, in_features: int, units: int):
        self.name = name
        self.in_features = in_features
        self.units = units

    def param_shapes(self):
        return {f"{self.name}.w": (self.in_features, self.units),
                f"{self.name}.b": (self.units,)}

    def init(self, rng, params, dtype):
        params[f"{self.name}.w"] = he_normal(
            rng, (self.in_features, self.units), self.in_features, dtype)
        params[f"{self.name}.b"] = np.zeros(self.units, dtype)

    def forward(self, x, params, mode, rng, cache):
        if x.shape[1] != self.in_features:
            raise ValueError(f"{self.name}: expected {self.in_features} features, got {x.shape[1]}")
        cache[self.name] = x
        return x @ params[f"{self.name}.w"] + params[f"{self.name}.b"]

    def backward(self, dy, params, cache, grads):
        x = cache[self.name]
        grads[f"{self.name}.w"] = x.T @ dy
        grads[f"{self.name}.b"] = dy.sum(axis=0)
        return dy @ params[f"{self.name}.w"].T
