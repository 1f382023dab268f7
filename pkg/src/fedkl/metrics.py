"""Reconstruction quality scores on the 0-255 pixel scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PIXEL_MAX = 255.0
IDENTICAL = "identical"


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean of squared per-pixel differences."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def psnr(mse_value: float) -> float:
    """``10 log10(255^2 / mse)``; ``inf`` for identical images."""
    if mse_value < 0:
        raise ValueError(f"mse must be non-negative, got {mse_value}")
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(PIXEL_MAX ** 2 / mse_value)


def _ssim_2d(a: np.ndarray, b: np.ndarray, window: int, c1: float, c2: float) -> float:
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, x_hat: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all ``window`` x ``window`` uniform windows (stride 1).

    Accepts (H, W) or (C, H, W) images; multi-channel scores are averaged.
    Window statistics use population (1/n) moments.
    """
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"ssim shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    if x.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {x.shape}")
    if x.shape[1] < window or x.shape[2] < window:
        raise ShapeError(f"image {x.shape[1:]} smaller than the {window}x{window} window")
    if np.array_equal(x, x_hat):
        return 1.0
    c1, c2 = (k1 * PIXEL_MAX) ** 2, (k2 * PIXEL_MAX) ** 2
    return float(np.mean([_ssim_2d(a, b, window, c1, c2) for a, b in zip(x, x_hat)]))


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    shape: tuple
    value_range: tuple = (0.0, PIXEL_MAX)

    def to_json(self) -> dict:
        return {"mse": self.mse, "psnr_db": IDENTICAL if math.isinf(self.psnr_db) else self.psnr_db,
                "ssim": self.ssim, "shape": list(self.shape), "value_range": list(self.value_range)}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        p = obj["psnr_db"]
        return cls(float(obj["mse"]), math.inf if p == IDENTICAL else float(p), float(obj["ssim"]),
                   tuple(obj["shape"]), tuple(obj.get("value_range", (0.0, PIXEL_MAX))))


def score(x_true: np.ndarray, x_rec: np.ndarray) -> MetricReport:
    """Score images given in [0, 1] engine units; they are scaled by 255 first."""
    a = np.asarray(x_true, dtype=np.float64) * PIXEL_MAX
    b = np.asarray(x_rec, dtype=np.float64) * PIXEL_MAX
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError("score expects a single image")
        a, b = a[0], b[0]
    m = mse(a, b)
    return MetricReport(m, psnr(m), ssim(a, b), tuple(a.shape))
