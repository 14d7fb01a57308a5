"""Synchronization strategies for the simulated worker cluster.

Four strategies share one node abstraction:

- ``bsp``: every step, per-node momentum updates are aggregated (sum or mean)
  and the aggregate is applied to every replica.
- ``gaia``: each node applies its momentum update locally, accumulates it
  into a residual, and broadcasts only coordinates whose accumulated relative
  change |v_j / w_j| crosses a threshold tied to the learning rate.
- ``fedavg``: nodes train independently for a fixed number of local steps,
  then replicas are replaced by their (optionally weighted) average.
- ``dgc``: momentum-corrected sparsification; only the largest accumulated
  update magnitudes are broadcast, with a warm-up sparsity schedule, and the
  shared replica moves only through the aggregated sparse sends.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ReplicaDivergenceError
from .nn.optim import OptState, sgd_momentum_step
from .nn.params import ParamVector

ALGOS = ("bsp", "gaia", "fedavg", "dgc")

# warm-up sparsity ramp: fraction of coordinates withheld per epoch bucket
DGC_SPARSITY_STAGES = (0.75, 0.9375, 0.984375, 0.996, 0.999)


@dataclass
class SyncConfig:
    algo: str = "bsp"
    bsp_aggregation: str = "mean"
    gaia_t0: float = 0.10
    gaia_t_min: float = 0.01
    fedavg_iter_local: int = 20
    fedavg_weighted: bool = False
    dgc_e_warm: int = 4
    dgc_clip_norm: float = 5.0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown sync algorithm {self.algo!r}")
        if self.bsp_aggregation not in ("sum", "mean"):
            raise ConfigError(f"unknown bsp aggregation {self.bsp_aggregation!r}")
        if self.gaia_t0 < 0:
            raise ConfigError("gaia_t0 must be >= 0")
        if self.fedavg_iter_local < 1:
            raise ConfigError("fedavg_iter_local must be >= 1")
        if self.dgc_e_warm < 1:
            raise ConfigError("dgc_e_warm must be >= 1")


@dataclass
class CommLedger:
    """Values moved over the simulated network, charged per node.

    Dense aggregation charges M values per node per step (BSP) or M up plus
    M down per round (FedAvg). Sparse broadcasts charge two values per entry
    (index + value) per recipient.
    """

    values_sent: int = 0
    values_received: int = 0
    rounds: int = 0

    @property
    def bytes_sent(self) -> int:
        return 4 * self.values_sent

    def snapshot(self) -> dict:
        return {
            "values_sent": self.values_sent,
            "values_received": self.values_received,
            "rounds": self.rounds,
        }


@dataclass
class NodeState:
    node_id: int
    model: "object"  # skewsim.nn.Model
    opt: OptState
    v: ParamVector | None = None  # accumulated unsent updates (gaia/dgc)
    sampler: "object" = None
    ledger: CommLedger = field(default_factory=CommLedger)
    cached_train_acc: float | None = None

    @property
    def w(self) -> ParamVector:
        return self.model.params


@dataclass
class SparseUpdate:
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def apply(self, flat: np.ndarray) -> None:
        flat[self.indices] += self.values

    def to_bytes(self) -> bytes:
        head = struct.pack("<I", len(self.indices))
        idx = self.indices.astype("<u4").tobytes()
        vals = self.values.astype("<f4").tobytes()
        # interleave (index, value) pairs
        body = b"".join(
            idx[i * 4 : i * 4 + 4] + vals[i * 4 : i * 4 + 4] for i in range(len(self.indices))
        )
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["SparseUpdate", int]:
        if len(data) < 4:
            raise FormatError("unexpected EOF in sparse update header")
        (count,) = struct.unpack("<I", data[:4])
        need = 4 + 8 * count
        if len(data) < need:
            raise FormatError("unexpected EOF in sparse update payload")
        pairs = np.frombuffer(data[4:need], dtype=np.dtype([("i", "<u4"), ("v", "<f4")]))
        return cls(pairs["i"].astype(np.int64), pairs["v"].copy()), need


def check_replicas(nodes: list[NodeState], rel_tol: float = 1e-5) -> None:
    """Errors if replicas that must agree have drifted apart."""
    w0 = nodes[0].w.data
    norm = float(np.linalg.norm(w0))
    for node in nodes[1:]:
        if float(np.linalg.norm(node.w.data - w0)) > rel_tol * max(norm, 1e-12):
            raise ReplicaDivergenceError(
                f"replica {node.node_id} diverged from replica 0"
            )


def bsp_round(nodes: list[NodeState], grads: list[ParamVector], aggregation: str = "mean") -> None:
    """One synchronous step: aggregate per-node momentum updates, apply everywhere."""
    check_replicas(nodes)
    m = len(nodes[0].w)
    agg = np.zeros(m, dtype=nodes[0].w.dtype)
    for node, grad in zip(nodes, grads):
        agg += sgd_momentum_step(node.opt, grad).data
    if aggregation == "mean":
        agg /= len(nodes)
    for node in nodes:
        node.w.data += agg
        node.ledger.values_sent += m
        node.ledger.values_received += m
        node.ledger.rounds += 1


def gaia_threshold(t0: float, eta_t: float, eta0: float, t_min: float = 0.01) -> float:
    """Significance threshold, shrinking in proportion to learning-rate decay."""
    if eta0 <= 0:
        raise ConfigError("eta0 must be positive")
    return max(t_min, t0 * eta_t / eta0)


def gaia_step(node: NodeState, threshold: float) -> SparseUpdate:
    """Extracts significant accumulated updates and clears them locally.

    A coordinate is significant when |v_j / w_j| > threshold; v_j != 0 at
    w_j = 0 counts as infinitely significant, and 0/0 stays local (it carries
    no update anyway).
    """
    w = node.w.data
    v = node.v.data
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(v / w)
    ratio[(w == 0) & (v != 0)] = np.inf
    np.nan_to_num(ratio, copy=False, nan=0.0)
    mask = ratio > threshold
    idx = np.nonzero(mask)[0]
    update = SparseUpdate(idx, v[idx].copy())
    v[idx] = 0.0
    return update


def gaia_exchange(nodes: list[NodeState], locals_u: list[ParamVector], threshold: float) -> list[SparseUpdate]:
    """Synchronous significance broadcast.

    Callers have accumulated this step's momentum updates into v but not yet
    applied them to w. Every node extracts its significant residuals, then
    each replica applies all K updates in ascending sender order: its own
    full local update at its slot, the others' sparse sends at theirs. The
    shared ascending order keeps replicas bit-identical when the threshold
    sends everything.
    """
    k = len(nodes)
    updates = [gaia_step(node, threshold) for node in nodes]
    for node in nodes:
        for sender in range(k):
            if sender == node.node_id:
                node.w.data += locals_u[sender].data
            else:
                updates[sender].apply(node.w.data)
                node.ledger.values_received += 2 * len(updates[sender])
        node.ledger.values_sent += 2 * len(updates[node.node_id]) * (k - 1)
        node.ledger.rounds += 1
    return updates


def dgc_sparsity(epoch: int, e_warm: int) -> float:
    """Warm-up sparsity for a 1-based epoch: one ramp stage per e_warm epochs."""
    if epoch < 1:
        raise ConfigError("epochs are 1-based")
    stage = min((epoch - 1) // e_warm, len(DGC_SPARSITY_STAGES) - 1)
    return DGC_SPARSITY_STAGES[stage]


def dgc_select(magnitudes: np.ndarray, sparsity: float) -> np.ndarray:
    """Indices of the coordinates DGC sends at the given sparsity.

    Keeps at least ceil((1 - s) * M) entries: everything strictly above the
    cut magnitude, topped up from the ties in ascending index order.
    """
    m = len(magnitudes)
    n = max(1, math.ceil((1.0 - sparsity) * m))
    if n >= m:
        return np.arange(m, dtype=np.int64)
    cut = np.partition(magnitudes, m - n)[m - n]
    above = np.nonzero(magnitudes > cut)[0]
    fill = n - len(above)
    ties = np.nonzero(magnitudes == cut)[0][:fill]
    return np.sort(np.concatenate([above, ties]))


def dgc_step(node: NodeState, grad: ParamVector, sparsity: float, eta: float, clip_norm: float | None) -> SparseUpdate:
    """Momentum-corrected sparsification of one gradient step.

    The raw gradient is clipped to a global L2 norm, folded into the momentum
    buffer scaled by -eta, and accumulated. The top accumulated magnitudes
    are extracted; both the residual and the momentum buffer are cleared at
    the sent coordinates so stale momentum does not leak later.
    """
    g = grad.data
    if clip_norm is not None and clip_norm > 0:
        norm = float(np.linalg.norm(g))
        if norm > clip_norm:
            g = g * (clip_norm / norm)
    u = node.opt.u.data
    u *= node.opt.momentum
    u -= eta * g
    v = node.v.data
    v += u
    idx = dgc_select(np.abs(v), sparsity)
    update = SparseUpdate(idx, v[idx].copy())
    v[idx] = 0.0
    u[idx] = 0.0
    return update


def dgc_exchange(nodes: list[NodeState], grads: list[ParamVector], sparsity: float, eta: float, clip_norm: float | None) -> None:
    """One DGC step: replicas move only through the summed sparse sends."""
    k = len(nodes)
    m = len(nodes[0].w)
    updates = [dgc_step(node, grad, sparsity, eta, clip_norm) for node, grad in zip(nodes, grads)]
    agg = np.zeros(m, dtype=nodes[0].w.dtype)
    for update in updates:
        update.apply(agg)
    for node in nodes:
        node.w.data += agg
        for sender, update in enumerate(updates):
            if sender != node.node_id:
                node.ledger.values_received += 2 * len(update)
        node.ledger.values_sent += 2 * len(updates[node.node_id]) * (k - 1)
        node.ledger.rounds += 1


def fedavg_round(nodes: list[NodeState], iter_local: int, local_step_fn, weights=None,
                 pre_average=None) -> None:
    """Local training burst followed by model averaging.

    ``local_step_fn(node)`` must run exactly one momentum-SGD minibatch step
    on the node's own partition; momentum buffers persist across rounds.
    ``pre_average(nodes)``, if given, observes the drifted replicas right
    before they are collapsed back onto the average.
    """
    for node in nodes:
        for _ in range(iter_local):
            local_step_fn(node)
    if pre_average is not None:
        pre_average(nodes)
    m = len(nodes[0].w)
    if weights is None:
        avg = np.zeros(m, dtype=nodes[0].w.dtype)
        for node in nodes:
            avg += node.w.data
        avg /= len(nodes)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        scale = weights / weights.sum()
        avg = np.zeros(m, dtype=nodes[0].w.dtype)
        for node, s in zip(nodes, scale):
            avg += node.w.data * nodes[0].w.dtype.type(s)
    for node in nodes:
        node.w.data[...] = avg
        node.ledger.values_sent += 2 * m  # model up + averaged model down
        node.ledger.values_received += 2 * m
        node.ledger.rounds += 1
