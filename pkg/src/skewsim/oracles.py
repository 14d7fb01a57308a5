"""Independent oracles the test suite checks the fast paths against.

Everything here trades speed for obviousness: full sorts instead of
partitions, scalar loops instead of vectorized reductions. None of it shares
code with the implementations it checks.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ShapeError


class TrajectoryTrace:
    """Parameter snapshots sampled along a training run."""

    def __init__(self):
        self.steps: list[int] = []
        self.hashes: list[str] = []
        self.snapshots: list[np.ndarray] = []

    def record(self, step: int, w: np.ndarray) -> None:
        w = np.asarray(w)
        self.steps.append(int(step))
        self.hashes.append(hashlib.sha256(np.ascontiguousarray(w).tobytes()).hexdigest())
        self.snapshots.append(w.copy())


def compare_trajectories(a: TrajectoryTrace, b: TrajectoryTrace,
                         rel_tol: float = 1e-6) -> tuple[float, int | None]:
    """Max relative deviation across snapshots and the first step over tol.

    Deviation at one snapshot is ||w_a - w_b||_inf / (1 + ||w_a||_inf).
    Returns (max deviation, first step whose deviation exceeds rel_tol, or
    None when every snapshot stays within it).
    """
    if a.steps != b.steps:
        raise ShapeError("traces cover different steps")
    max_dev = 0.0
    first = None
    for step, wa, wb in zip(a.steps, a.snapshots, b.snapshots):
        if wa.shape != wb.shape:
            raise ShapeError("parameter layouts differ")
        dev = float(np.max(np.abs(wa - wb)) / (1.0 + np.max(np.abs(wa))))
        if dev > max_dev:
            max_dev = dev
        if first is None and dev > rel_tol:
            first = step
    return max_dev, first


def brute_force_topk(v: np.ndarray, sparsity: float) -> np.ndarray:
    """The DGC selection rule via a full sort.

    Keeps n = max(1, ceil((1 - s) * M)) entries ranked by descending |v|,
    ties broken toward the lower index. Returns ascending indices.
    """
    v = np.asarray(v)
    m = len(v)
    n = max(1, math.ceil((1.0 - sparsity) * m))
    order = sorted(range(m), key=lambda i: (-abs(float(v[i])), i))
    return np.sort(np.asarray(order[:n], dtype=np.int64))


def batchnorm_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                        eps: float = 1e-5) -> np.ndarray:
    """Training-mode batch normalization, one channel at a time."""
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x)
    channels = x.shape[1]
    for c in range(channels):
        vals = x[:, c].reshape(-1)
        mu = sum(float(t) for t in vals) / len(vals)
        var = sum((float(t) - mu) ** 2 for t in vals) / len(vals)
        y[:, c] = gamma[c] * (x[:, c] - mu) / math.sqrt(var + eps) + beta[c]
    return y


def groupnorm_reference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                        group_size: int, eps: float = 1e-5) -> np.ndarray:
    """Group normalization, one sample and group at a time."""
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x)
    n, channels = x.shape[0], x.shape[1]
    for i in range(n):
        for g0 in range(0, channels, group_size):
            sl = x[i, g0 : g0 + group_size]
            vals = sl.reshape(-1)
            mu = sum(float(t) for t in vals) / len(vals)
            var = sum((float(t) - mu) ** 2 for t in vals) / len(vals)
            norm = (sl - mu) / math.sqrt(var + eps)
            for c in range(sl.shape[0]):
                y[i, g0 + c] = gamma[g0 + c] * norm[c] + beta[g0 + c]
    return y


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g
