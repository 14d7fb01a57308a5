"""Datasets and label-skewed partitioning.

A partition plan assigns every training sample to one of K virtual worker
partitions. A skew fraction alpha controls how non-IID the plan is: for each
label, a fraction alpha of its samples go to that label's home partition
(labels are dealt to partitions round-robin), and the rest are scattered
evenly at random over all partitions. alpha=0 is IID, alpha=1 gives every
partition an exclusive set of labels.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # (N, D) float32 feature rows
    y: np.ndarray  # (N,) int64 labels in [0, num_classes)
    train_idx: np.ndarray
    val_idx: np.ndarray
    num_classes: int
    image_shape: tuple[int, int, int] | None = None

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def train_xy(self):
        return self.x[self.train_idx], self.y[self.train_idx]

    def val_xy(self):
        return self.x[self.val_idx], self.y[self.val_idx]


def _stratified_split(y: np.ndarray, val_fraction: float, seed: int):
    """Holds out round(val_fraction * n_c) samples of each class, deterministically."""
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(y):
        idx = np.nonzero(y == c)[0]
        perm = rng.permutation(idx)
        n_val = int(round(val_fraction * len(idx)))
        val.append(perm[:n_val])
    val_idx = np.sort(np.concatenate(val)) if val else np.empty(0, dtype=np.int64)
    mask = np.ones(len(y), dtype=bool)
    mask[val_idx] = False
    return np.nonzero(mask)[0], val_idx


def synth_dataset(
    num_classes: int,
    num_samples: int,
    dim: int,
    separation: float,
    seed: int,
    val_fraction: float = 0.1,
) -> Dataset:
    """Gaussian blobs: one unit-covariance cluster per class.

    Class means sit pairwise at distance ``separation`` (seeded rotation of
    scaled one-hot corners when dim >= num_classes, random sphere directions
    otherwise, where the distance is only approximate). The rotation spreads
    class evidence over every feature instead of one coordinate per class.
    """
    if num_classes < 2 or num_samples < num_classes:
        raise ConfigError("need at least two classes and one sample per class")
    rng = np.random.default_rng(seed)
    radius = separation / math.sqrt(2.0)
    if dim >= num_classes:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = radius
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        means = means @ (q * np.sign(np.diag(r)))
    else:
        raw = rng.standard_normal((num_classes, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        means = raw * radius
    y = rng.permutation(np.arange(num_samples) % num_classes).astype(np.int64)
    x = means[y] + rng.standard_normal((num_samples, dim))
    train_idx, val_idx = _stratified_split(y, val_fraction, seed)
    return Dataset(x.astype(np.float32), y, train_idx, val_idx, num_classes)


def _read_idx_header(buf: bytes, path: str, want_magic: int, ndim: int):
    if len(buf) < 4 * (1 + ndim):
        raise FormatError(f"{path}: unexpected EOF in header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != want_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{want_magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])
    return dims, buf[4 + 4 * ndim :]


def load_idx(
    images_path: str,
    labels_path: str,
    num_classes: int | None = None,
    standardize: bool = False,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Loads an IDX image/label file pair (bytes scaled to [0, 1])."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    (n, rows, cols), ipayload = _read_idx_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (ln,), lpayload = _read_idx_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if n != ln:
        raise FormatError(f"image count {n} does not match label count {ln}")
    if len(ipayload) < n * rows * cols:
        raise FormatError(f"{images_path}: unexpected EOF in pixel data")
    if len(lpayload) < n:
        raise FormatError(f"{labels_path}: unexpected EOF in label data")
    pixels = np.frombuffer(ipayload[: n * rows * cols], dtype=np.uint8)
    x = (pixels.reshape(n, rows * cols).astype(np.float32)) / 255.0
    y = np.frombuffer(lpayload[:n], dtype=np.uint8).astype(np.int64)
    declared = num_classes if num_classes is not None else int(y.max()) + 1
    if y.max() >= declared:
        raise FormatError(
            f"label {int(y.max())} out of range for declared {declared} classes"
        )
    train_idx, val_idx = _stratified_split(y, val_fraction, seed)
    if standardize:
        mean = x[train_idx].mean()
        std = max(float(x[train_idx].std()), 1e-8)
        x = (x - mean) / std
    return Dataset(x, y, train_idx, val_idx, declared, image_shape=(1, rows, cols))


def load_csv(
    path: str,
    num_classes: int | None = None,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Loads a CSV with header ``label,f0,f1,...``."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "label":
            raise FormatError(f"{path}: first column must be 'label'")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.shape[1] != len(header):
        raise FormatError(f"{path}: rows have {body.shape[1]} columns, header has {len(header)}")
    y = body[:, 0].astype(np.int64)
    x = body[:, 1:].astype(np.float32)
    declared = num_classes if num_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= declared:
        raise FormatError(f"{path}: labels outside [0, {declared})")
    train_idx, val_idx = _stratified_split(y, val_fraction, seed)
    return Dataset(x, y, train_idx, val_idx, declared)


@dataclass
class PartitionPlan:
    num_partitions: int
    skew_fraction: float
    seed: int
    label_groups: list[list[int]]  # home labels per partition
    assignment: np.ndarray  # sample index -> partition id, -1 outside train split
    home_counts: list[int] | None = None  # per label, samples pinned to the home partition

    def partition_indices(self, p: int) -> np.ndarray:
        return np.nonzero(self.assignment == p)[0]

    def partitions(self) -> list[np.ndarray]:
        return [self.partition_indices(p) for p in range(self.num_partitions)]


def make_partition_plan(dataset: Dataset, k: int, skew_fraction: float, seed: int) -> PartitionPlan:
    if not 0.0 <= skew_fraction <= 1.0:
        raise ConfigError(f"skew_fraction must lie in [0, 1], got {skew_fraction}")
    if k < 1:
        raise ConfigError("need at least one partition")
    c = dataset.num_classes
    if skew_fraction > 0 and k > c:
        raise ConfigError(
            f"skew needs a home partition per label: k={k} exceeds {c} classes"
        )
    rng = np.random.default_rng(seed)
    label_groups = [[l for l in range(c) if l % k == p] for p in range(k)]
    assignment = np.full(len(dataset.y), -1, dtype=np.int64)
    train_idx = dataset.train_idx
    y_train = dataset.y[train_idx]
    scatter = []
    home_counts = []
    for label in range(c):
        idx = train_idx[y_train == label]
        perm = rng.permutation(idx)
        n_home = int(round(skew_fraction * len(idx)))
        home_counts.append(n_home)
        assignment[perm[:n_home]] = label % k
        scatter.append(perm[n_home:])
    pool = np.concatenate(scatter) if scatter else np.empty(0, dtype=np.int64)
    pool = rng.permutation(pool)
    # balanced uniform scatter: deal the shuffled pool round-robin so partition
    # sizes stay within one sample of the expected share
    deal_order = rng.permutation(k)
    for i, sample in enumerate(pool):
        assignment[sample] = deal_order[i % k]
    return PartitionPlan(k, skew_fraction, seed, label_groups, assignment, home_counts)


def skew_report(plan: PartitionPlan, dataset: Dataset) -> np.ndarray:
    """(K, C) matrix: share of each label's training samples per partition."""
    k, c = plan.num_partitions, dataset.num_classes
    counts = np.zeros((k, c), dtype=np.float64)
    for p in range(k):
        idx = plan.partition_indices(p)
        for label, n in zip(*np.unique(dataset.y[idx], return_counts=True)):
            counts[p, int(label)] = n
    totals = counts.sum(axis=0)
    shares = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return shares


def _rle_encode(values: np.ndarray) -> list[list[int]]:
    runs = []
    if len(values) == 0:
        return runs
    current = int(values[0])
    length = 1
    for v in values[1:]:
        v = int(v)
        if v == current:
            length += 1
        else:
            runs.append([current, length])
            current, length = v, 1
    runs.append([current, length])
    return runs


def _rle_decode(runs: list[list[int]]) -> np.ndarray:
    if not runs:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([np.full(n, v, dtype=np.int64) for v, n in runs])


def plan_to_json(plan: PartitionPlan) -> str:
    return json.dumps(
        {
            "num_partitions": plan.num_partitions,
            "skew_fraction": plan.skew_fraction,
            "seed": plan.seed,
            "label_groups": plan.label_groups,
            "assignment_runs": _rle_encode(plan.assignment),
            "home_counts": plan.home_counts,
        },
        sort_keys=True,
    )


def plan_from_json(text: str) -> PartitionPlan:
    d = json.loads(text)
    return PartitionPlan(
        num_partitions=d["num_partitions"],
        skew_fraction=d["skew_fraction"],
        seed=d["seed"],
        label_groups=[list(g) for g in d["label_groups"]],
        assignment=_rle_decode(d["assignment_runs"]),
        home_counts=d.get("home_counts"),
    )


class BatchSampler:
    """Shuffle-once-per-cycle minibatch stream over one partition.

    Every sample appears exactly once per cycle. When the partition is
    exhausted the sampler reshuffles and wraps, so partitions smaller than
    the largest one revisit samples within a global epoch.
    """

    def __init__(self, indices: np.ndarray, batch_size: int, seed):
        if len(indices) == 0:
            raise ShapeError("cannot sample from an empty partition")
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(self.indices)
        self.cursor = 0
        self.cycles = 0

    def next_batch(self) -> np.ndarray:
        parts = []
        need = self.batch_size
        while need > 0:
            take = min(need, len(self.perm) - self.cursor)
            parts.append(self.perm[self.cursor : self.cursor + take])
            self.cursor += take
            need -= take
            if self.cursor >= len(self.perm):
                self.perm = self.rng.permutation(self.indices)
                self.cursor = 0
                self.cycles += 1
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "perm": self.perm.copy(),
            "cursor": self.cursor,
            "cycles": self.cycles,
        }

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.perm = state["perm"].copy()
        self.cursor = int(state["cursor"])
        self.cycles = int(state["cycles"])
