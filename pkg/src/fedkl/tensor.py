"""Dense float64 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers below add the shape checks and the finiteness guarantee the
rest of the package relies on: every public operation raises
:class:`~fedkl.errors.NonFiniteError` instead of returning NaN or Inf.

Convolution is cross-correlation (no kernel flip) with zero padding.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

DTYPE = np.float64


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``data`` into a fresh contiguous float64 array, optionally reshaped."""
    arr = np.array(data, dtype=DTYPE, order="C", copy=True)
    if shape is not None:
        arr = reshape(arr, shape)
    return ensure_finite(arr, "as_tensor")


def ensure_finite(arr: np.ndarray, op: str = "operation") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s)")
    return arr


def reshape(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {tuple(x.shape)} ({x.size} values) to {shape}")
    return np.ascontiguousarray(x).reshape(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of an (m, k) and a (k, n) matrix."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return ensure_finite(a @ b, "matmul")


def reduce(x: np.ndarray, axes: int | Iterable[int] | None = None, kind: str = "sum") -> np.ndarray:
    """Sum, mean or max over ``axes`` (all axes when ``None``)."""
    if axes is not None:
        axes = (axes,) if isinstance(axes, int) else tuple(axes)
        for ax in axes:
            if not -x.ndim <= ax < x.ndim:
                raise ShapeError(f"axis {ax} out of range for shape {tuple(x.shape)}")
    if kind == "sum":
        out = np.sum(x, axis=axes)
    elif kind == "mean":
        out = np.mean(x, axis=axes)
    elif kind == "max":
        out = np.max(x, axis=axes)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return ensure_finite(np.asarray(out, dtype=DTYPE), f"reduce[{kind}]")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold (B, C, H, W) into patches of shape (B, C*K*K, H'*W').

    The patch axis is ordered (c, h, w), matching the layout of a (O, C, K, K)
    weight reshaped to (O, C*K*K).
    """
    b, c, h, w = x.shape
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kernel > h + 2 * pad or kernel > w + 2 * pad:
        raise ShapeError(f"kernel {kernel} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # win: (B, C, H', W', K, K) -> (B, C, K, K, H', W')
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kernel * kernel, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: Sequence[int], kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to (B, C, H, W)."""
    b, c, h, w = x_shape
    ho = conv_output_size(h, kernel, stride, pad)
    wo = conv_output_size(w, kernel, stride, pad)
    cols = cols.reshape(b, c, kernel, kernel, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation: (B, C, H, W) with (O, C, K, K) plus bias (O,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects square kernels, got {tuple(w.shape)}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {tuple(b.shape)} does not match {w.shape[0]} kernels")
    k = w.shape[2]
    cols = im2col(x, k, stride, pad)
    ho = conv_output_size(x.shape[2], k, stride, pad)
    wo = conv_output_size(x.shape[3], k, stride, pad)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]
    return ensure_finite(out.reshape(x.shape[0], w.shape[0], ho, wo), "conv2d")
