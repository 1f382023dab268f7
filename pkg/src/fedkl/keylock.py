"""Key-lock normalization.

A key-lock block keeps the batch-norm normalization but stops treating the
per-channel scale and shift as trainable parameters.  They are instead the
outputs of two affine "lock" maps applied to a private random key:

    gamma = key @ W_lock_gamma + b_lock_gamma
    beta  = key @ W_lock_beta  + b_lock_beta

The key and the four lock arrays stay on the client.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, KeyRequiredError, ShapeError
from .layers import LOCK_PRIVATE, BNCache, Layer, ParamSpec, batchnorm_backward, batchnorm_forward
from .tensor import ensure_finite

DEFAULT_KEY_LEN = 1024


@dataclass(frozen=True)
class Key:
    values: np.ndarray
    seed: int

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.size < 1:
            raise ShapeError(f"key must be a non-empty vector, got shape {self.values.shape}")
        ensure_finite(self.values, "key")

    def __len__(self) -> int:
        return self.values.size


def generate_key(seed: int, key_len: int = DEFAULT_KEY_LEN) -> Key:
    """Deterministic standard-normal key of length ``key_len``."""
    if key_len < 1:
        raise ValueError(f"key length must be >= 1, got {key_len}")
    values = np.random.default_rng(seed).standard_normal(key_len)
    return Key(values, int(seed))


def save_key(key: Key, path) -> None:
    """Layout: u64 seed, u32 length, then float64 values; all little-endian."""
    payload = struct.pack("<QI", key.seed & 0xFFFFFFFFFFFFFFFF, len(key))
    Path(path).write_bytes(payload + key.values.astype("<f8").tobytes())


def load_key(path) -> Key:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: key file truncated ({len(raw)} bytes)")
    seed, n = struct.unpack_from("<QI", raw)
    if len(raw) != 12 + 8 * n:
        raise FormatError(f"{path}: expected {12 + 8 * n} bytes for a key of length {n}, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=12, count=n).astype(np.float64)
    return Key(values, int(seed))


@dataclass
class KeyLockModule:
    """The two lock maps of one block; weights are (S, O), biases (O,)."""

    w_gamma: np.ndarray
    b_gamma: np.ndarray
    w_beta: np.ndarray
    b_beta: np.ndarray

    def __post_init__(self):
        s, o = self.w_gamma.shape
        if s < 1:
            raise ShapeError("key length must be >= 1")
        if self.w_beta.shape != (s, o) or self.b_gamma.shape != (o,) or self.b_beta.shape != (o,):
            raise ShapeError("inconsistent lock shapes")

    @property
    def key_len(self) -> int:
        return self.w_gamma.shape[0]

    @property
    def out_channels(self) -> int:
        return self.w_gamma.shape[1]

    @classmethod
    def init(cls, key_len: int, out_channels: int, rng: np.random.Generator) -> "KeyLockModule":
        """Near-identity start: gamma ~ 1 and beta ~ 0 for a standard-normal key."""
        std = 1.0 / np.sqrt(key_len)
        return cls(rng.normal(0.0, std, (key_len, out_channels)), np.ones(out_channels),
                   rng.normal(0.0, std, (key_len, out_channels)), np.zeros(out_channels))


def _key_values(key) -> np.ndarray:
    return key.values if isinstance(key, Key) else np.asarray(key, dtype=np.float64)


def keylock_coeffs(module: KeyLockModule, key) -> tuple[np.ndarray, np.ndarray]:
    k = _key_values(key)
    if k.shape != (module.key_len,):
        raise ShapeError(f"key length {k.size} does not match lock input size {module.key_len}")
    gamma = k @ module.w_gamma + module.b_gamma
    beta = k @ module.w_beta + module.b_beta
    return ensure_finite(gamma, "keylock gamma"), ensure_finite(beta, "keylock beta")


class KeyLockCache(NamedTuple):
    bn: BNCache
    key: np.ndarray


def keylock_forward(x: np.ndarray, module: KeyLockModule, key, eps: float = 1e-5,
                    per_sample: bool = False) -> tuple[np.ndarray, KeyLockCache]:
    gamma, beta = keylock_coeffs(module, key)
    s, bn_cache = batchnorm_forward(x, gamma, beta, eps, per_sample)
    return s, KeyLockCache(bn_cache, _key_values(key))


def keylock_backward(cache: KeyLockCache, upstream: np.ndarray, key=None):
    """Returns ``(grad_w_gamma, grad_w_beta, grad_b_gamma, grad_b_beta, grad_x)``.

    The weight gradients are outer products of the key with the batch-norm
    scale/shift gradients, so each has rank one.
    """
    k = cache.key if key is None else _key_values(key)
    if k.shape != cache.key.shape:
        raise ShapeError("key does not match the forward pass")
    g_gamma, g_beta, grad_x = batchnorm_backward(cache.bn, upstream)
    if g_gamma.ndim == 2:   # per-sample: (N, O) -> (N, S, O)
        grad_wg = k[None, :, None] * g_gamma[:, None, :]
        grad_wb = k[None, :, None] * g_beta[:, None, :]
    else:
        grad_wg = np.outer(k, g_gamma)
        grad_wb = np.outer(k, g_beta)
    return grad_wg, grad_wb, g_gamma, g_beta, grad_x


@dataclass(frozen=True)
class KeyLockNorm(Layer):
    """Model layer wrapping :func:`keylock_forward` / :func:`keylock_backward`."""

    name: str
    channels: int
    key_len: int = DEFAULT_KEY_LEN
    eps: float = 1e-5
    lock_bias: bool = True

    @property
    def names(self) -> dict:
        p = self.name
        return {"w_gamma": f"{p}.lock_gamma.weight", "b_gamma": f"{p}.lock_gamma.bias",
                "w_beta": f"{p}.lock_beta.weight", "b_beta": f"{p}.lock_beta.bias"}

    def param_specs(self):
        n = self.names
        specs = [ParamSpec(n["w_gamma"], (self.key_len, self.channels), LOCK_PRIVATE, "normal_scaled", self.key_len),
                 ParamSpec(n["w_beta"], (self.key_len, self.channels), LOCK_PRIVATE, "normal_scaled", self.key_len)]
        if self.lock_bias:
            specs += [ParamSpec(n["b_gamma"], (self.channels,), LOCK_PRIVATE, "ones"),
                      ParamSpec(n["b_beta"], (self.channels,), LOCK_PRIVATE, "zeros")]
        return specs

    def module(self, params) -> KeyLockModule:
        n = self.names
        zeros = np.zeros(self.channels)
        return KeyLockModule(params[n["w_gamma"]], params.get(n["b_gamma"], zeros),
                             params[n["w_beta"]], params.get(n["b_beta"], zeros))

    def forward(self, params, x, key=None, per_sample=False):
        if key is None:
            raise KeyRequiredError(f"key required: layer {self.name!r} is a key-lock block")
        return keylock_forward(x, self.module(params), key, self.eps, per_sample)

    def backward(self, params, cache, upstream, per_sample=False, need_params=True):
        if not need_params:
            return {}, batchnorm_backward(cache.bn, upstream)[2]
        gwg, gwb, gbg, gbb, gx = keylock_backward(cache, upstream)
        n = self.names
        grads = {n["w_gamma"]: gwg, n["w_beta"]: gwb}
        if self.lock_bias:
            grads[n["b_gamma"]] = gbg
            grads[n["b_beta"]] = gbb
        return grads, gx

    def describe(self):
        return {"type": "keylock", "name": self.name, "channels": self.channels,
                "key_len": self.key_len, "eps": self.eps, "lock_bias": self.lock_bias}
