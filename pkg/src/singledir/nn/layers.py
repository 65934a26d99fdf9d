"""Layer declarations and their forward/backward kernels.

All kernels operate on float64 numpy arrays.  Dense activations are laid out
``[N, F]`` and convolutional activations ``[N, C, H, W]``.  Dense weights are
stored ``[in, out]`` so row ``i`` holds the outgoing weights of input unit
``i`` and column ``j`` the incoming weights of output unit ``j``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError

KINDS = ("dense", "conv2d", "relu", "batchnorm", "dropout", "flatten")
KERNEL_SIZE = 3


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    p: float | None = None
    num_features: int | None = None
    momentum: float | None = None
    eps: float | None = None

    @classmethod
    def dense(cls, in_features: int, out_features: int) -> LayerSpec:
        return cls("dense", in_features=in_features, out_features=out_features)

    @classmethod
    def conv2d(cls, in_channels: int, out_channels: int, stride: int = 1) -> LayerSpec:
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_size=KERNEL_SIZE, stride=stride)

    @classmethod
    def relu(cls) -> LayerSpec:
        return cls("relu")

    @classmethod
    def flatten(cls) -> LayerSpec:
        return cls("flatten")

    @classmethod
    def dropout(cls, p: float) -> LayerSpec:
        return cls("dropout", p=p)

    @classmethod
    def batchnorm(cls, num_features: int, momentum: float = 0.9, eps: float = 1e-5) -> LayerSpec:
        return cls("batchnorm", num_features=num_features, momentum=momentum, eps=eps)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown layer fields {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense":
            if not (self.in_features and self.out_features) or self.in_features < 1 or self.out_features < 1:
                raise ConfigError("dense layer needs positive in_features/out_features")
        elif self.kind == "conv2d":
            if not (self.in_channels and self.out_channels) or self.in_channels < 1 or self.out_channels < 1:
                raise ConfigError("conv2d layer needs positive channel counts")
            if self.kernel_size != KERNEL_SIZE:
                raise ConfigError("only 3x3 'same' convolutions are supported")
            if not isinstance(self.stride, int) or self.stride < 1:
                raise ConfigError("conv2d stride must be a positive integer")
        elif self.kind == "dropout":
            if self.p is None or not 0.0 <= self.p < 1.0:
                raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p}")
        elif self.kind == "batchnorm":
            if not self.num_features or self.num_features < 1:
                raise ConfigError("batchnorm needs a positive num_features")
            if self.eps is None or self.eps <= 0:
                raise ConfigError("batchnorm eps must be > 0")
            if self.momentum is None or not 0.0 <= self.momentum <= 1.0:
                raise ConfigError("batchnorm momentum must lie in [0, 1]")

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-example output shape, raising ConfigError on incompatible input."""
        k = self.kind
        if k == "dense":
            if in_shape != (self.in_features,):
                raise ConfigError(f"dense expects input ({self.in_features},), got {in_shape}")
            return (self.out_features,)
        if k == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.in_channels:
                raise ConfigError(f"conv2d expects ({self.in_channels}, H, W) input, got {in_shape}")
            _, h, w = in_shape
            return (self.out_channels, (h - 1) // self.stride + 1, (w - 1) // self.stride + 1)
        if k == "batchnorm":
            if len(in_shape) not in (1, 3) or in_shape[0] != self.num_features:
                raise ConfigError(f"batchnorm over {self.num_features} features got input {in_shape}")
            return in_shape
        if k == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.kind == "dense":
            bound = math.sqrt(6.0 / self.in_features)
            return {"weight": rng.uniform(-bound, bound, (self.in_features, self.out_features)),
                    "bias": np.zeros(self.out_features)}
        if self.kind == "conv2d":
            fan_in = self.in_channels * KERNEL_SIZE * KERNEL_SIZE
            bound = math.sqrt(6.0 / fan_in)
            shape = (self.out_channels, self.in_channels, KERNEL_SIZE, KERNEL_SIZE)
            return {"weight": rng.uniform(-bound, bound, shape),
                    "bias": np.zeros(self.out_channels)}
        if self.kind == "batchnorm":
            return {"gamma": np.ones(self.num_features), "beta": np.zeros(self.num_features)}
        return {}

    def init_buffers(self) -> dict[str, np.ndarray]:
        if self.kind == "batchnorm":
            return {"running_mean": np.zeros(self.num_features),
                    "running_var": np.ones(self.num_features)}
        return {}


# --- dense -----------------------------------------------------------------

def dense_forward(x, params):
    return x @ params["weight"] + params["bias"], x


def dense_backward(dout, cache, params):
    x = cache
    grads = {"weight": x.T @ dout, "bias": dout.sum(axis=0)}
    return dout @ params["weight"].T, grads


# --- conv2d (3x3, same padding, integer stride) ------------------------------

def _im2col(x, stride):
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * KERNEL_SIZE * KERNEL_SIZE)
    return cols, ho, wo


def conv_forward(x, params, stride):
    w = params["weight"]
    n = x.shape[0]
    o = w.shape[0]
    cols, ho, wo = _im2col(x, stride)
    out = cols @ w.reshape(o, -1).T + params["bias"]
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, stride)


def conv_backward(dout, cache, params):
    cols, x_shape, stride = cache
    w = params["weight"]
    n, c, h, wd = x_shape
    o, ho, wo = dout.shape[1], dout.shape[2], dout.shape[3]
    dy = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    grads = {"weight": (dy.T @ cols).reshape(w.shape), "bias": dy.sum(axis=0)}
    dcols = (dy @ w.reshape(o, -1)).reshape(n, ho, wo, c, KERNEL_SIZE, KERNEL_SIZE)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], grads


# --- batchnorm -----------------------------------------------------------------

def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x):
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def batchnorm_forward(x, params, buffers, spec: LayerSpec, train: bool, update_stats: bool = True):
    axes, shape = _bn_axes(x), _bn_shape(x)
    gamma = params["gamma"].reshape(shape)
    beta = params["beta"].reshape(shape)
    if not train:
        mean = buffers["running_mean"].reshape(shape)
        var = buffers["running_var"].reshape(shape)
        return (x - mean) / np.sqrt(var + spec.eps) * gamma + beta, None
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    if update_stats:
        m = spec.momentum
        buffers["running_mean"] = m * buffers["running_mean"] + (1.0 - m) * mean
        buffers["running_var"] = m * buffers["running_var"] + (1.0 - m) * var
    inv_std = 1.0 / np.sqrt(var + spec.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    return xhat * gamma + beta, (xhat, inv_std)


def batchnorm_backward(dout, cache, params):
    xhat, inv_std = cache
    axes, shape = _bn_axes(dout), _bn_shape(dout)
    m = dout.size // params["gamma"].size
    grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
    dxhat = dout * params["gamma"].reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, grads


# --- elementwise ---------------------------------------------------------------

def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, out > 0


def relu_backward(dout, cache):
    return dout * cache


def dropout_forward(x, p, train, rng):
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache
