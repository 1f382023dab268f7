"""Desk-scale models with a tagged parameter registry.

Every trainable array lives in ``Model.params`` under a dotted name and carries
a tag: ``shareable`` parameters may leave the client, ``lock_private`` ones
(the lock maps of a key-lock block) never do.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, KeyRequiredError, ShapeError
from .keylock import DEFAULT_KEY_LEN, KeyLockNorm
from .layers import (LOCK_PRIVATE, SHAREABLE, BatchNorm, Conv2d, Flatten, Layer, Linear, ReLU,
                     Sigmoid, one_hot, softmax_ce)
from .tensor import conv_output_size, ensure_finite

NORM_VARIANTS = ("none", "plain", "keylock")


# ---------------------------------------------------------------- gradient bundles


@dataclass
class GradientBundle:
    """Per-parameter gradients keyed by registry name, with the registry's tags."""

    grads: dict[str, np.ndarray]
    tags: dict[str, str]

    def __post_init__(self):
        if set(self.grads) != set(self.tags):
            raise ShapeError("bundle gradients and tags cover different names")

    def names(self) -> list[str]:
        return list(self.grads)

    def subset(self, names) -> "GradientBundle":
        names = [n for n in self.grads if n in set(names)]
        return GradientBundle({n: self.grads[n] for n in names}, {n: self.tags[n] for n in names})

    def with_tag(self, tag: str) -> "GradientBundle":
        return self.subset([n for n, t in self.tags.items() if t == tag])

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle({n: g * factor for n, g in self.grads.items()}, dict(self.tags))

    def equals(self, other: "GradientBundle") -> bool:
        return (list(self.grads) == list(other.grads) and self.tags == other.tags
                and all(np.array_equal(self.grads[n], other.grads[n]) for n in self.grads))

    def to_json(self) -> dict:
        return {n: {"tag": self.tags[n], "shape": list(g.shape), "values": g.ravel().tolist()}
                for n, g in self.grads.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "GradientBundle":
        grads = {n: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for n, v in obj.items()}
        return cls(grads, {n: v["tag"] for n, v in obj.items()})


def partition(bundle: GradientBundle) -> tuple[GradientBundle, GradientBundle]:
    """Split into (shareable, lock_private) bundles."""
    return bundle.with_tag(SHAREABLE), bundle.with_tag(LOCK_PRIVATE)


def merge(*bundles: GradientBundle) -> GradientBundle:
    grads, tags = {}, {}
    for b in bundles:
        overlap = set(grads) & set(b.grads)
        if overlap:
            raise ValueError(f"bundles overlap on {sorted(overlap)}")
        grads.update(b.grads)
        tags.update(b.tags)
    return GradientBundle(grads, tags)


# ---------------------------------------------------------------- model


@dataclass
class Model:
    layers: list[Layer]
    params: dict[str, np.ndarray]
    tags: dict[str, str]
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        declared = [s.name for layer in self.layers for s in layer.param_specs()]
        if len(declared) != len(set(declared)) or set(declared) != set(self.params):
            raise ShapeError("registry does not match the parameters declared by the layers")
        if set(self.tags) != set(self.params):
            raise ShapeError("every parameter needs exactly one tag")
        lock_declared = {s.name for layer in self.layers if isinstance(layer, KeyLockNorm)
                         for s in layer.param_specs()}
        if not {n for n, t in self.tags.items() if t == LOCK_PRIVATE} <= lock_declared:
            raise ShapeError("lock_private tag on a parameter outside a key-lock block")

    @property
    def has_keylock(self) -> bool:
        return any(isinstance(layer, KeyLockNorm) for layer in self.layers)

    def names_with_tag(self, tag: str) -> list[str]:
        return [n for n in self.params if self.tags[n] == tag]

    @property
    def shareable_names(self) -> list[str]:
        return self.names_with_tag(SHAREABLE)

    @property
    def lock_names(self) -> list[str]:
        return self.names_with_tag(LOCK_PRIVATE)

    @property
    def output_bias(self) -> str:
        last = [layer for layer in self.layers if isinstance(layer, Linear)][-1]
        return f"{last.name}.bias"

    @property
    def first_linear(self) -> Linear:
        return [layer for layer in self.layers if isinstance(layer, Linear)][0]

    @property
    def n_classes(self) -> int:
        return self.params[self.output_bias].shape[0]

    def n_params(self, tag: str | None = None) -> int:
        return sum(p.size for n, p in self.params.items() if tag is None or self.tags[n] == tag)

    def clone(self) -> "Model":
        return Model(list(self.layers), {n: p.copy() for n, p in self.params.items()}, dict(self.tags),
                     json.loads(json.dumps(self.arch)))

    def with_params(self, updates: dict[str, np.ndarray]) -> "Model":
        """Copy of the model with some registry entries replaced."""
        params = dict(self.params)
        for n, v in updates.items():
            if n not in params:
                raise KeyError(f"unknown parameter {n!r}")
            if v.shape != params[n].shape:
                raise ShapeError(f"{n}: shape {v.shape} does not match {params[n].shape}")
            params[n] = np.array(v, dtype=np.float64)
        return Model(self.layers, params, self.tags, self.arch)

    def forward(self, x, key=None, per_sample: bool = False):
        if self.has_keylock and key is None:
            raise KeyRequiredError("key required: model contains a key-lock block")
        caches = []
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h, cache = layer.forward(self.params, h, key, per_sample)
            caches.append(cache)
        return ensure_finite(h, "model forward"), caches

    def predict(self, x, key=None) -> np.ndarray:
        logits, _ = self.forward(x, key)
        return logits.argmax(axis=1)


class ForwardBackward(NamedTuple):
    loss: float | np.ndarray
    probs: np.ndarray
    bundle: GradientBundle
    caches: list


def _targets(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    return y.astype(np.float64) if y.ndim == 2 else one_hot(y, n_classes)


def forward_backward(model: Model, x, y, key=None, *, soft: bool = False,
                     per_sample: bool = False, only=None) -> ForwardBackward:
    """Loss, softmax output and gradients of every registry parameter.

    ``y`` is either integer class labels or a (N, classes) target matrix;
    pass ``soft=True`` for non-one-hot targets.  ``only`` restricts the
    returned bundle to the given parameter names; layers none of whose
    parameters are requested skip their parameter gradients.
    """
    logits, caches = model.forward(x, key, per_sample)
    target = _targets(y, logits.shape[1])
    loss, g = softmax_ce(logits, target, soft=soft, per_sample=per_sample)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    wanted = list(model.params) if only is None else [n for n in model.params if n in set(only)]
    grads: dict[str, np.ndarray] = {}
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        need = any(s.name in wanted for s in layer.param_specs())
        layer_grads, g = layer.backward(model.params, cache, g, per_sample, need)
        grads.update(layer_grads)
    ordered = {n: ensure_finite(grads[n], f"gradient of {n}") for n in wanted}
    return ForwardBackward(loss, probs, GradientBundle(ordered, {n: model.tags[n] for n in wanted}), caches)


def sgd_step(model: Model, bundle: GradientBundle, lr: float) -> Model:
    """``p <- p - lr * grad_p`` for every parameter present in ``bundle``."""
    updates = {}
    for n, g in bundle.grads.items():
        p = model.params[n]
        if g.shape != p.shape:
            raise ShapeError(f"{n}: gradient shape {g.shape} does not match parameter {p.shape}")
        updates[n] = p - lr * g
    return model.with_params(updates)


# ---------------------------------------------------------------- builders


def _norm_layer(variant: str, name: str, channels: int, key_len: int, lock_bias: bool) -> Layer | None:
    if variant == "none":
        return None
    if variant == "plain":
        return BatchNorm(f"{name}_bn", channels)
    if variant == "keylock":
        return KeyLockNorm(f"{name}_kl", channels, key_len, lock_bias=lock_bias)
    raise ValueError(f"norm variant must be one of {NORM_VARIANTS}, got {variant!r}")


def init_params(layers: list[Layer], rng: np.random.Generator, init: str = "he"):
    params, tags = {}, {}
    for layer in layers:
        for spec in layer.param_specs():
            if spec.init == "ones":
                value = np.ones(spec.shape)
            elif spec.init == "zeros" or init == "zeros":
                value = np.zeros(spec.shape)
            elif spec.init == "he":
                value = rng.normal(0.0, np.sqrt(2.0 / spec.fan_in), spec.shape)
            elif spec.init == "normal_scaled":
                value = rng.normal(0.0, np.sqrt(1.0 / spec.fan_in), spec.shape)
            else:
                raise ValueError(f"unknown init {spec.init!r}")
            params[spec.name] = value
            tags[spec.name] = spec.tag
    return params, tags


def build_mlp(dims, with_bn: str = "none", *, activation: str = "relu", key_len: int = DEFAULT_KEY_LEN,
              seed: int = 0, init: str = "he", lock_bias: bool = True) -> Model:
    """FC -> (norm) -> activation -> ... -> FC, ending in logits.

    Inputs of any shape are flattened row-major first.  The normalization
    block, if any, follows the first FC layer only.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    if activation not in ("relu", "sigmoid"):
        raise ValueError(f"unknown activation {activation!r}")
    layers: list[Layer] = [Flatten()]
    for i in range(len(dims) - 1):
        layers.append(Linear(f"fc{i + 1}", dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            norm = _norm_layer(with_bn, f"fc{i + 1}", dims[i + 1], key_len, lock_bias) if i == 0 else None
            if norm is not None:
                layers.append(norm)
            layers.append(ReLU() if activation == "relu" else Sigmoid())
    arch = {"kind": "mlp", "dims": dims, "with_bn": with_bn, "activation": activation,
            "key_len": key_len, "lock_bias": lock_bias}
    params, tags = init_params(layers, np.random.default_rng(seed), init)
    return Model(layers, params, tags, arch)


def build_tinycnn(in_shape, channels: int, classes: int, with_bn: str = "none", *, kernel: int = 3,
                  stride: int = 1, pad: int = 1, activation: str = "relu", n_conv: int = 1,
                  key_len: int = DEFAULT_KEY_LEN, seed: int = 0, init: str = "he",
                  lock_bias: bool = True) -> Model:
    """``n_conv`` x (conv -> activation) -> flatten -> FC.

    The normalization block, if any, sits between the last conv and its
    activation.
    """
    if activation not in ("relu", "sigmoid"):
        raise ValueError(f"unknown activation {activation!r}")
    if n_conv < 1:
        raise ValueError("n_conv must be >= 1")
    c, h, w = (int(v) for v in in_shape)
    layers: list[Layer] = []
    c_in, ho, wo = c, h, w
    for i in range(1, n_conv + 1):
        if kernel > ho + 2 * pad or kernel > wo + 2 * pad:
            raise ShapeError(f"kernel {kernel} larger than padded input {ho + 2 * pad}x{wo + 2 * pad}")
        layers.append(Conv2d(f"conv{i}", c_in, channels, kernel, stride, pad))
        ho, wo, c_in = conv_output_size(ho, kernel, stride, pad), conv_output_size(wo, kernel, stride, pad), channels
        norm = _norm_layer(with_bn, f"conv{i}", channels, key_len, lock_bias) if i == n_conv else None
        if norm is not None:
            layers.append(norm)
        layers.append(ReLU() if activation == "relu" else Sigmoid())
    layers += [Flatten(), Linear("fc1", channels * ho * wo, classes)]
    arch = {"kind": "tinycnn", "in_shape": [c, h, w], "channels": channels, "classes": classes,
            "with_bn": with_bn, "kernel": kernel, "stride": stride, "pad": pad, "activation": activation,
            "n_conv": n_conv, "key_len": key_len, "lock_bias": lock_bias}
    params, tags = init_params(layers, np.random.default_rng(seed), init)
    return Model(layers, params, tags, arch)


def build_from_arch(arch: dict, seed: int = 0) -> Model:
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "mlp":
        return build_mlp(arch.pop("dims"), arch.pop("with_bn"), seed=seed, **arch)
    if kind == "tinycnn":
        return build_tinycnn(arch.pop("in_shape"), arch.pop("channels"), arch.pop("classes"),
                             arch.pop("with_bn"), seed=seed, **arch)
    raise ValueError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"FKLM"
_VERSION = 1


def save_checkpoint(model: Model, path, names=None) -> None:
    """Write ``model`` (or only the registry entries in ``names``).

    Layout: magic ``FKLM``, u16 version, u32 header length, UTF-8 JSON header
    (architecture plus name/shape/tag per entry), then each entry's values as
    little-endian float64 in header order.
    """
    names = list(model.params) if names is None else [n for n in model.params if n in set(names)]
    header = {"arch": model.arch,
              "params": [{"name": n, "shape": list(model.params[n].shape), "tag": model.tags[n]} for n in names]}
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<HI", _VERSION, len(head)) + head)
        for n in names:
            f.write(model.params[n].astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    version, head_len = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[10:10 + head_len])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 10 + head_len
    params, tags = {}, {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise FormatError(f"{path}: payload truncated at {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw, "<f8", count, offset).astype(np.float64).reshape(entry["shape"])
        tags[entry["name"]] = entry["tag"]
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["arch"], params, tags


def load_model(path, base: Model | None = None) -> Model:
    """Rebuild a model from a checkpoint.

    Entries missing from a partial checkpoint are taken from ``base``; without
    a base the checkpoint must be complete.
    """
    arch, params, tags = read_checkpoint(path)
    model = build_from_arch(arch) if base is None else base.clone()
    if base is not None and base.arch != arch:
        raise ShapeError("checkpoint architecture does not match the base model")
    missing = set(model.params) - set(params)
    if base is None and missing:
        raise FormatError(f"{path}: checkpoint lacks {sorted(missing)}")
    for n, t in tags.items():
        if model.tags.get(n) != t:
            raise FormatError(f"{path}: tag mismatch for {n}")
    return model.with_params(params)
