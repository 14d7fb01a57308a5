"""Measurements of skew damage and communication cost."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AccuracyLossReport:
    source_node: int
    target_node: int
    local_acc: float
    remote_acc: float
    sample_count: int

    @property
    def accuracy_loss(self) -> float:
        return self.local_acc - self.remote_acc


@dataclass(frozen=True)
class DivergenceReport:
    layer: int
    setting: str
    per_channel: np.ndarray
    overall: float


def accuracy_loss(
    model,
    local_acc: float,
    remote_x: np.ndarray,
    remote_y: np.ndarray,
    subset_size: int = 512,
    seed: int = 0,
    source_node: int = -1,
    target_node: int = -1,
) -> AccuracyLossReport:
    """How much worse a node's model is on another partition's training data.

    ``local_acc`` is the most recent cached training accuracy on the model's
    own partition; the remote side is a seeded subset so the probe costs the
    same no matter how large the partition is.
    """
    n = len(remote_y)
    take = min(subset_size, n)
    if take < n:
        rng = np.random.default_rng(seed)
        pick = rng.choice(n, size=take, replace=False)
        remote_x, remote_y = remote_x[pick], remote_y[pick]
    remote = model.evaluate(remote_x, remote_y)
    return AccuracyLossReport(source_node, target_node, float(local_acc), float(remote), take)


def moment_divergence(mu_a: np.ndarray, mu_b: np.ndarray, per_channel: bool = False):
    """Relative distance between two windows of minibatch channel means.

    The scalar form is ||mu_a - mu_b|| / ||(mu_a + mu_b) / 2||; the
    per-channel form applies the same ratio channel by channel. A zero
    denominator makes the ratio undefined and yields NaN.
    """
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    if mu_a.shape != mu_b.shape:
        raise ValueError("channel mean vectors must share a shape")
    avg = 0.5 * (mu_a + mu_b)
    if per_channel:
        out = np.full(mu_a.shape, np.nan)
        ok = avg != 0
        out[ok] = np.abs(mu_a - mu_b)[ok] / np.abs(avg)[ok]
        return out
    denom = float(np.linalg.norm(avg))
    if denom == 0.0:
        return math.nan
    return float(np.linalg.norm(mu_a - mu_b) / denom)


def _flat(arr):
    return arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else np.asarray(arr)


def residual_update_delta(v, w, floor: float = 1e-12) -> float:
    """Mean relative magnitude of unsent accumulated updates, |v_i / w_i|.

    Coordinates with |w_i| below ``floor`` are skipped so near-zero weights
    do not blow up the mean.
    """
    v = _flat(v)
    w = _flat(w)
    keep = np.abs(w) >= floor
    if not np.any(keep):
        return math.nan
    return float(np.mean(np.abs(v[keep] / w[keep])))


def local_update_delta(replicas, w_avg, floor: float = 1e-12) -> float:
    """Mean relative distance of per-node replicas from their average."""
    w_avg = _flat(w_avg)
    keep = np.abs(w_avg) >= floor
    if not np.any(keep):
        return math.nan
    deltas = [np.mean(np.abs((_flat(w)[keep] - w_avg[keep]) / w_avg[keep])) for w in replicas]
    return float(np.mean(deltas))


def comm_savings(baseline_values_sent: int, algo_values_sent: int) -> float:
    """How many times less traffic than the dense baseline; inf when zero."""
    if algo_values_sent == 0:
        return math.inf
    return baseline_values_sent / algo_values_sent
