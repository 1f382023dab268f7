"""Datasets (IDX files, synthetic blobs) and PPM image export."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # (N, C, H, W) in [0, 1]
    labels: np.ndarray   # (N,) int64
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise ShapeError(f"dataset images must be a non-empty (N, C, H, W) array, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def sample(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i:i + 1].copy(), int(self.labels[i])


# ---------------------------------------------------------------- IDX


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims, dtype=np.int64))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return dims, payload


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """MNIST-format unsigned-byte images (N, H, W) and labels (N,)."""
    (n, h, w), pix = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (m,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if n != m:
        raise FormatError(f"image count {n} does not match label count {m}")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, n_classes or int(labels.max()) + 1)


def write_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path) -> None:
    n, h, w = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
                                  + np.asarray(images_u8, dtype=np.uint8).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels_u8.size)
                                  + np.asarray(labels_u8, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------- synthetic


def blob_templates(rng: np.random.Generator, classes: int, shape, bumps: int = 3) -> np.ndarray:
    """One smooth template per class: a few Gaussian bumps rescaled to [0, 1]."""
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            img = np.zeros((h, w))
            for _ in range(bumps):
                cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
                r = rng.uniform(0.12, 0.3) * max(h, w)
                img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            out[k, ch] = img / img.max()
    return out


def synth_blobs(seed: int, classes: int = 4, shape=(1, 8, 8), n_per_class: int = 50,
                sigma: float = 0.05) -> Dataset:
    """Per-class template plus N(0, sigma^2) pixel noise, clipped to [0, 1], shuffled."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    templates = blob_templates(rng, classes, tuple(shape))
    labels = np.repeat(np.arange(classes), n_per_class)
    images = templates[labels] + rng.normal(0.0, sigma, (labels.size,) + tuple(shape)) if sigma > 0 \
        else templates[labels].copy()
    order = rng.permutation(labels.size)
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], classes)


def split(dataset: Dataset, n_parts: int, seed: int) -> list[Dataset]:
    """IID shards of near-equal size."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset.subset(part) for part in np.array_split(order, n_parts)]


# ---------------------------------------------------------------- PPM


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """(C, H, W) in [0, 1] -> (H, W, 3) uint8, clamped then rounded."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"expected a (1|3, H, W) image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6 PPM; single-channel images are replicated to RGB."""
    rgb = to_bytes_image(image)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read back a file produced by :func:`write_ppm` as (H, W, 3) uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise FormatError(f"{path}: not a P6 PPM written by this package")
    w, h = (int(v) for v in parts[1].split())
    if len(parts[3]) != 3 * w * h:
        raise FormatError(f"{path}: pixel payload truncated")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
