"""Forward and hand-derived backward passes for the analysed layers.

Every ``*_backward`` takes the cache produced by its ``*_forward`` together
with the upstream gradient ``dL/d(output)`` and returns parameter gradients
followed by ``dL/d(input)``.

``per_sample=True`` treats each row of the batch as an independent batch of
one: batch-norm statistics are taken per sample, parameter gradients keep a
leading batch axis instead of being summed, and the loss is not averaged.
The attacks use this to evaluate many batch-1 probes in a single call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .tensor import col2im, conv_output_size, ensure_finite, im2col

SHAREABLE = "shareable"
LOCK_PRIVATE = "lock_private"


# ---------------------------------------------------------------- linear


class LinearCache(NamedTuple):
    x: np.ndarray
    weight: np.ndarray


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, LinearCache]:
    """``u = x @ weight.T + bias`` for x of shape (N, D_x) and weight (D_o, D_x)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    u = x @ weight.T + bias
    return ensure_finite(u, "linear_forward"), LinearCache(x, weight)


def linear_backward(cache: LinearCache, upstream: np.ndarray, per_sample: bool = False):
    x, weight = cache
    if upstream.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear upstream {tuple(upstream.shape)} does not match output "
                         f"{(x.shape[0], weight.shape[0])}")
    if per_sample:
        grad_w = upstream[:, :, None] * x[:, None, :]
        grad_b = upstream.copy()
    else:
        grad_w = upstream.T @ x
        grad_b = upstream.sum(axis=0)
    grad_x = upstream @ weight
    return grad_w, grad_b, grad_x


# ---------------------------------------------------------------- activations


def relu_forward(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = u > 0
    return np.where(mask, u, 0.0), mask


def relu_backward(mask: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is 0.
    return upstream * mask


def sigmoid(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def sigmoid_forward(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = sigmoid(u)
    return a, a


def sigmoid_backward(a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """``a`` is the cached sigmoid output, so the local factor is a(1 - a)."""
    return upstream * a * (1.0 - a)


# ---------------------------------------------------------------- convolution


class ConvCache(NamedTuple):
    cols: np.ndarray
    x_shape: tuple
    weight: np.ndarray
    stride: int
    pad: int


def conv2d_forward(x, weight, bias, stride: int = 1, pad: int = 0) -> tuple[np.ndarray, ConvCache]:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    k = weight.shape[2]
    cols = im2col(x, k, stride, pad)
    ho = conv_output_size(x.shape[2], k, stride, pad)
    wo = conv_output_size(x.shape[3], k, stride, pad)
    out = np.matmul(weight.reshape(weight.shape[0], -1), cols) + bias[None, :, None]
    out = out.reshape(x.shape[0], weight.shape[0], ho, wo)
    return ensure_finite(out, "conv2d_forward"), ConvCache(cols, x.shape, weight, stride, pad)


def conv2d_backward(cache: ConvCache, upstream: np.ndarray, per_sample: bool = False):
    """Gradients of a cross-correlation layer.

    ``grad_w[d, c, h, w] = sum_ij upstream[d, i, j] * x[c, i*s + h - p, j*s + w - p]``,
    ``grad_b[d] = sum_ij upstream[d, i, j]``; ``grad_x`` is the transposed
    correlation of ``upstream`` with the kernels.
    """
    cols, x_shape, weight, stride, pad = cache
    n, o = x_shape[0], weight.shape[0]
    if upstream.ndim != 4 or upstream.shape[:2] != (n, o):
        raise ShapeError(f"conv2d upstream {tuple(upstream.shape)} does not match forward output")
    g = upstream.reshape(n, o, -1)
    if per_sample:
        grad_w = np.matmul(g, cols.transpose(0, 2, 1)).reshape((n,) + weight.shape)
        grad_b = g.sum(axis=2)
    else:
        grad_w = np.einsum("nop,nqp->oq", g, cols, optimize=True).reshape(weight.shape)
        grad_b = g.sum(axis=(0, 2))
    return grad_w, grad_b, conv2d_input_grad(cache, upstream)


def conv2d_input_grad(cache: ConvCache, upstream: np.ndarray) -> np.ndarray:
    _, x_shape, weight, stride, pad = cache
    g = upstream.reshape(x_shape[0], weight.shape[0], -1)
    dcols = np.matmul(weight.reshape(weight.shape[0], -1).T, g)
    return col2im(dcols, x_shape, weight.shape[2], stride, pad)


# ---------------------------------------------------------------- batch norm


class BNCache(NamedTuple):
    centered: np.ndarray  # u - mu
    x_hat: np.ndarray
    var: np.ndarray
    gamma: np.ndarray     # broadcast-shaped
    eps: float
    axes: tuple
    count: int


def _stat_axes(ndim: int, per_sample: bool) -> tuple:
    if ndim == 4:
        return (2, 3) if per_sample else (0, 2, 3)
    if ndim == 2:
        return () if per_sample else (0,)
    raise ShapeError(f"batch norm expects 2-D or 4-D input, got {ndim}-D")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1, 1, 1) if ndim == 4 else (1, -1))


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5,
                      per_sample: bool = False) -> tuple[np.ndarray, BNCache]:
    """Train-mode batch norm; statistics per channel over batch and spatial axes."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = _stat_axes(x.ndim, per_sample)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch norm scale/shift {tuple(gamma.shape)} do not match {x.shape[1]} channels")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    x_hat = centered / np.sqrt(var + eps)
    g = _channel_view(gamma, x.ndim)
    s = g * x_hat + _channel_view(beta, x.ndim)
    return ensure_finite(s, "batchnorm_forward"), BNCache(centered, x_hat, var, g, eps, axes, count)


def batchnorm_backward(cache: BNCache, upstream: np.ndarray, frozen_stats: bool = False):
    """Returns ``(grad_gamma, grad_beta, grad_x)``.

    ``grad_x`` is assembled from the three paths through ``x_hat``, the batch
    variance and the batch mean; ``frozen_stats`` keeps only the first, as if
    mean and variance were constants.  In per-sample mode the parameter
    gradients have shape (N, C).
    """
    centered, x_hat, var, gamma, eps, axes, m = cache
    if upstream.shape != x_hat.shape:
        raise ShapeError(f"batch norm upstream {tuple(upstream.shape)} does not match cache {tuple(x_hat.shape)}")
    grad_gamma = (upstream * x_hat).sum(axis=axes)
    grad_beta = upstream.sum(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    d_xhat = upstream * gamma
    if frozen_stats:
        return _param_shape(grad_gamma, x_hat, axes), _param_shape(grad_beta, x_hat, axes), d_xhat * inv_std
    d_var = (d_xhat * centered).sum(axis=axes, keepdims=True) * -0.5 * inv_std ** 3
    d_mu = (-inv_std * d_xhat.sum(axis=axes, keepdims=True)
            + d_var * (-2.0 * centered).sum(axis=axes, keepdims=True) / m)
    grad_x = d_xhat * inv_std + d_var * 2.0 * centered / m + d_mu / m
    return _param_shape(grad_gamma, x_hat, axes), _param_shape(grad_beta, x_hat, axes), grad_x


def _param_shape(g: np.ndarray, x_hat: np.ndarray, axes: tuple) -> np.ndarray:
    return g.reshape(x_hat.shape[:2]) if x_hat.ndim == 4 and axes == (2, 3) else g


# ---------------------------------------------------------------- loss


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_one_hot(y: np.ndarray, n_classes: int) -> None:
    if y.ndim != 2 or y.shape[1] != n_classes:
        raise ShapeError(f"labels {tuple(y.shape)} do not match {n_classes} classes")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax_ce(z: np.ndarray, y: np.ndarray, soft: bool = False, per_sample: bool = False):
    """Mean cross-entropy of ``softmax(z)`` against ``y`` and its gradient in ``z``.

    ``y`` must be one-hot unless ``soft`` is set, in which case any rows of
    non-negative weights summing to one are accepted.
    """
    if z.ndim != 2 or y.shape != z.shape:
        raise ShapeError(f"logits {tuple(z.shape)} and labels {tuple(y.shape)} differ")
    if not soft:
        check_one_hot(y, z.shape[1])
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    losses = -(y * log_p).sum(axis=1)
    if per_sample:
        return ensure_finite(losses, "softmax_ce"), p - y
    n = z.shape[0]
    return float(ensure_finite(losses, "softmax_ce").mean()), (p - y) / n


# ---------------------------------------------------------------- layer objects


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    tag: str = SHAREABLE
    init: str = "zeros"   # zeros | ones | he | normal_scaled
    fan_in: int = 1


class Layer:
    """A stateless layer; parameters live in the model's registry by name."""

    def param_specs(self) -> list[ParamSpec]:
        return []

    def forward(self, params, x, key=None, per_sample=False):
        raise NotImplementedError

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Linear(Layer):
    name: str
    d_in: int
    d_out: int

    def param_specs(self):
        return [ParamSpec(f"{self.name}.weight", (self.d_out, self.d_in), init="he", fan_in=self.d_in),
                ParamSpec(f"{self.name}.bias", (self.d_out,))]

    def forward(self, params, x, key=None, per_sample=False):
        return linear_forward(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"])

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        if not need_params:
            return {}, upstream @ cache.weight
        gw, gb, gx = linear_backward(cache, upstream, per_sample)
        return {f"{self.name}.weight": gw, f"{self.name}.bias": gb}, gx

    def describe(self):
        return {"type": "linear", "name": self.name, "d_in": self.d_in, "d_out": self.d_out}


@dataclass(frozen=True)
class Conv2d(Layer):
    name: str
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def param_specs(self):
        fan_in = self.c_in * self.kernel * self.kernel
        return [ParamSpec(f"{self.name}.weight", (self.c_out, self.c_in, self.kernel, self.kernel),
                          init="he", fan_in=fan_in),
                ParamSpec(f"{self.name}.bias", (self.c_out,))]

    def forward(self, params, x, key=None, per_sample=False):
        return conv2d_forward(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"],
                              self.stride, self.pad)

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        if not need_params:
            return {}, conv2d_input_grad(cache, upstream)
        gw, gb, gx = conv2d_backward(cache, upstream, per_sample)
        return {f"{self.name}.weight": gw, f"{self.name}.bias": gb}, gx

    def describe(self):
        return {"type": "conv2d", "name": self.name, "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad}


@dataclass(frozen=True)
class BatchNorm(Layer):
    name: str
    channels: int
    eps: float = 1e-5

    def param_specs(self):
        return [ParamSpec(f"{self.name}.gamma", (self.channels,), init="ones"),
                ParamSpec(f"{self.name}.beta", (self.channels,))]

    def forward(self, params, x, key=None, per_sample=False):
        return batchnorm_forward(x, params[f"{self.name}.gamma"], params[f"{self.name}.beta"],
                                 self.eps, per_sample)

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        gg, gb, gx = batchnorm_backward(cache, upstream)
        return {f"{self.name}.gamma": gg, f"{self.name}.beta": gb}, gx

    def describe(self):
        return {"type": "batchnorm", "name": self.name, "channels": self.channels, "eps": self.eps}


@dataclass(frozen=True)
class ReLU(Layer):
    def forward(self, params, x, key=None, per_sample=False):
        return relu_forward(x)

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        return {}, relu_backward(cache, upstream)

    def describe(self):
        return {"type": "relu"}


@dataclass(frozen=True)
class Sigmoid(Layer):
    def forward(self, params, x, key=None, per_sample=False):
        return sigmoid_forward(x)

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        return {}, sigmoid_backward(cache, upstream)

    def describe(self):
        return {"type": "sigmoid"}


@dataclass(frozen=True)
class Flatten(Layer):
    def forward(self, params, x, key=None, per_sample=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        return {}, upstream.reshape(cache)

    def describe(self):
        return {"type": "flatten"}
