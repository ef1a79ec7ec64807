"""Independent reference computations used to check the engine."""
from __future__ import annotations

import mpmath
import numpy as np


def central_difference(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Numeric gradient of scalar ``f()`` w.r.t. every entry of ``arrays`` (mutated in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def fd_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def cross_entropy_mp(logits: np.ndarray, labels: np.ndarray, dps: int = 50) -> float:
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for row, y in zip(logits, labels):
            lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
            total += lse - mpmath.mpf(float(row[y]))
        return float(total / len(labels))


def softmax_categorical(log_alphas) -> np.ndarray:
    a = np.exp(np.asarray(log_alphas, dtype=np.float64))
    return a / a.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
