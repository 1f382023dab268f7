"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

FD_STEP = 1e-4
REL_TOL = 1e-4


def numerical_gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - b| / (|a| + |b|)``; gradients that are both below ``floor`` count as equal."""
    num = np.linalg.norm(a - b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    if den <= floor:
        return 0.0
    return float(num / den)
