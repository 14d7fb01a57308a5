"""Lockstep cluster simulation: K virtual nodes training one shared task.

A superstep consumes one minibatch per node (or a whole local round for
federated averaging), runs the configured synchronization, and advances the
global step counter. Epochs are paced by the largest partition; smaller
partitions re-wrap their shuffled streams.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .config import ExperimentConfig, config_from_json
from .data import BatchSampler, Dataset, load_csv, load_idx, make_partition_plan, synth_dataset
from .errors import ConfigError, FormatError, NonFiniteError
from .metrics import local_update_delta, moment_divergence, residual_update_delta
from .nn.io import MAGIC, VERSION, Reader, Writer
from .nn.model import Model, ModelSpec
from .nn.optim import LrSchedule, OptState, lr_at, sgd_momentum_step
from .sync import (
    CommLedger,
    NodeState,
    SyncConfig,
    bsp_round,
    dgc_exchange,
    dgc_sparsity,
    fedavg_round,
    gaia_exchange,
    gaia_threshold,
)

# consecutive non-finite losses tolerated before a run is declared divergent
DIVERGENCE_PATIENCE = 10


class MetricsLog:
    """Append-only metric rows plus a final summary dictionary."""

    def __init__(self):
        self.rows: list[tuple[int, int, int, str, float]] = []
        self.summary: dict = {}

    def log(self, epoch: int, step: int, node: int, metric: str, value: float) -> None:
        self.rows.append((int(epoch), int(step), int(node), str(metric), float(value)))

    def values(self, metric: str, node: int | None = None) -> list[float]:
        return [
            r[4]
            for r in self.rows
            if r[3] == metric and (node is None or r[2] == node)
        ]

    def last(self, metric: str, node: int | None = None, default: float = math.nan) -> float:
        vals = self.values(metric, node)
        return vals[-1] if vals else default

    def csv_text(self) -> str:
        lines = ["epoch,step,node,metric,value"]
        for epoch, step, node, metric, value in self.rows:
            lines.append(f"{epoch},{step},{node},{metric},{value!r}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        return json.dumps(self.summary, sort_keys=True, indent=2) + "\n"


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "synth":
        return synth_dataset(
            cfg.synth_classes,
            cfg.synth_samples,
            cfg.synth_dim,
            cfg.synth_separation,
            cfg.seed_data,
            val_fraction=cfg.val_fraction,
        )
    if cfg.dataset == "idx":
        return load_idx(
            cfg.idx_images,
            cfg.idx_labels,
            num_classes=cfg.num_classes or None,
            standardize=cfg.standardize,
            val_fraction=cfg.val_fraction,
            seed=cfg.seed_data,
        )
    return load_csv(
        cfg.csv_path,
        num_classes=cfg.num_classes or None,
        val_fraction=cfg.val_fraction,
        seed=cfg.seed_data,
    )


def model_spec_for(cfg: ExperimentConfig, dataset: Dataset) -> ModelSpec:
    image_shape = dataset.image_shape if cfg.arch == "smallconv" else None
    return ModelSpec(
        arch=cfg.arch,
        input_dim=dataset.dim,
        num_classes=dataset.num_classes,
        norm=cfg.norm,
        group_size=cfg.group_size,
        hidden=cfg.hidden,
        image_shape=image_shape,
    )


def _norm_slot_channels(spec: ModelSpec) -> list[int]:
    if spec.arch == "mlp":
        return [spec.hidden, spec.hidden]
    if spec.arch == "smallconv":
        return list(spec.conv_channels)
    return []


class Cluster:
    def __init__(self, config: ExperimentConfig, dataset: Dataset | None = None):
        self.config = config
        self.dataset = dataset if dataset is not None else build_dataset(config)
        self.plan = make_partition_plan(
            self.dataset, config.nodes, config.skew_fraction, config.seed_data
        )
        partitions = self.plan.partitions()
        if any(len(p) == 0 for p in partitions):
            raise ConfigError("a partition received no samples; grow the dataset")
        self.partition_sizes = [len(p) for p in partitions]
        self.steps_per_epoch = math.ceil(max(self.partition_sizes) / config.batch_size)
        self.total_steps = config.epochs * self.steps_per_epoch
        if config.lr_schedule == "step":
            self.schedule = LrSchedule(
                "step", config.lr0, tuple((int(e), float(d)) for e, d in config.lr_step_drops)
            )
        else:
            self.schedule = LrSchedule(
                "poly", config.lr0, poly_power=config.lr_poly_power,
                poly_max_iter=self.total_steps,
            )
        self.sync = SyncConfig(
            algo=config.algo,
            bsp_aggregation=config.bsp_aggregation,
            gaia_t0=config.gaia_t0,
            gaia_t_min=config.gaia_t_min,
            fedavg_iter_local=config.fedavg_iter_local,
            fedavg_weighted=config.fedavg_weighted,
            dgc_e_warm=config.dgc_e_warm,
            dgc_clip_norm=config.dgc_clip_norm,
        )
        dtype = np.float64 if config.dtype == "f64" else np.float32
        spec = model_spec_for(config, self.dataset)
        base = Model(spec, dtype, init_seed=config.seed_init)
        needs_v = config.algo in ("gaia", "dgc")
        seeds = np.random.SeedSequence(config.seed_sampling).spawn(config.nodes)
        self.nodes: list[NodeState] = []
        for k in range(config.nodes):
            model = base if k == 0 else base.copy()
            self.nodes.append(
                NodeState(
                    node_id=k,
                    model=model,
                    opt=OptState(
                        u=model.params.zeros_like(),
                        momentum=config.momentum,
                        eta=config.lr0,
                        weight_decay=config.weight_decay,
                    ),
                    v=model.params.zeros_like() if needs_v else None,
                    sampler=BatchSampler(partitions[k], config.batch_size, seeds[k]),
                )
            )
        self.step = 0
        self.nonfinite_streak = 0
        self.diverged = False
        self.last_local_delta = math.nan
        self._slot_channels = _norm_slot_channels(spec)
        self._moment_sum = [
            [np.zeros(c, dtype=np.float64) for c in self._slot_channels]
            for _ in range(config.nodes)
        ]
        self._moment_count = 0
        self._last_eval_epoch = 0
        self._last_good: bytes | None = None

    # -- schedule helpers ---------------------------------------------------

    def epoch_index(self, step: int | None = None) -> int:
        s = self.step if step is None else step
        return s // self.steps_per_epoch

    def lr_now(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        return lr_at(self.schedule, self.epoch_index(s), s)

    @property
    def model_size(self) -> int:
        return self.nodes[0].model.size

    # -- one superstep ------------------------------------------------------

    def _node_step(self, node: NodeState, eta: float):
        batch = node.sampler.next_batch()
        x = self.dataset.x[batch]
        y = self.dataset.y[batch]
        node.opt.eta = eta
        try:
            _, cache = node.model.forward(x, train=True)
            grad, loss, _ = node.model.backprop(cache, y, self.config.weight_decay)
            means = cache.norm_input_means
        except NonFiniteError:
            grad = node.model.params.zeros_like()
            loss = math.nan
            means = [np.zeros(c) for c in self._slot_channels]
        for slot, mu in enumerate(means):
            self._moment_sum[node.node_id][slot] += mu
        return grad, loss

    def superstep(self, log: MetricsLog | None = None) -> None:
        if self.diverged or self.step >= self.total_steps:
            return
        with np.errstate(all="ignore"):
            self._superstep_inner(log)

    def _superstep_inner(self, log: MetricsLog | None) -> None:
        # overflow/invalid are expected on the way to the divergence sentinel
        losses: list[float] = []
        if self.sync.algo == "fedavg":
            n_local = min(self.sync.fedavg_iter_local, self.total_steps - self.step)
            offsets = [0] * len(self.nodes)

            def local_fn(node: NodeState) -> None:
                t = self.step + offsets[node.node_id]
                grad, loss = self._node_step(node, self.lr_now(t))
                u = sgd_momentum_step(node.opt, grad)
                node.w.data += u.data
                offsets[node.node_id] += 1
                losses.append(loss)

            def pre_average(nodes):
                avg = np.zeros(self.model_size, dtype=np.float64)
                for node in nodes:
                    avg += node.w.data
                avg /= len(nodes)
                self.last_local_delta = local_update_delta([n.w.data for n in nodes], avg)

            weights = self.partition_sizes if self.sync.fedavg_weighted else None
            fedavg_round(self.nodes, n_local, local_fn, weights=weights, pre_average=pre_average)
            self.step += n_local
            self._moment_count += n_local
            steps_taken = n_local
        else:
            eta = self.lr_now()
            grads = []
            for node in self.nodes:
                grad, loss = self._node_step(node, eta)
                grads.append(grad)
                losses.append(loss)
            if self.sync.algo == "bsp":
                bsp_round(self.nodes, grads, self.sync.bsp_aggregation)
            elif self.sync.algo == "gaia":
                updates = [sgd_momentum_step(node.opt, grad) for node, grad in zip(self.nodes, grads)]
                for node, u in zip(self.nodes, updates):
                    node.v.data += u.data
                threshold = gaia_threshold(
                    self.sync.gaia_t0, eta, self.schedule.eta0, self.sync.gaia_t_min
                )
                gaia_exchange(self.nodes, updates, threshold)
            else:
                sparsity = dgc_sparsity(self.epoch_index() + 1, self.sync.dgc_e_warm)
                clip = self.sync.dgc_clip_norm if self.sync.dgc_clip_norm > 0 else None
                dgc_exchange(self.nodes, grads, sparsity, eta, clip)
            self.step += 1
            self._moment_count += 1
            steps_taken = 1
        if any(not math.isfinite(l) for l in losses):
            self.nonfinite_streak += steps_taken
            if self.nonfinite_streak >= DIVERGENCE_PATIENCE:
                self.diverged = True
        else:
            self.nonfinite_streak = 0
        if log is not None:
            self._flush_moments(log)

    def _flush_moments(self, log: MetricsLog) -> None:
        if not self._slot_channels or self._moment_count < self.config.moment_window:
            return
        k = len(self.nodes)
        for slot in range(len(self._slot_channels)):
            mus = [self._moment_sum[i][slot] / self._moment_count for i in range(k)]
            divs = [
                moment_divergence(mus[i], mus[j])
                for i in range(k)
                for j in range(i + 1, k)
            ]
            finite = [d for d in divs if math.isfinite(d)]
            if finite:
                log.log(
                    self.epoch_index(), self.step, -1,
                    f"moment_div.layer{slot}", float(np.mean(finite)),
                )
        for i in range(k):
            for slot in range(len(self._slot_channels)):
                self._moment_sum[i][slot][...] = 0.0
        self._moment_count = 0

    # -- evaluation ---------------------------------------------------------

    def global_eval_model(self) -> Model:
        """Shared-replica model with averaged BatchNorm running statistics."""
        base = self.nodes[0].model.copy()
        if self.sync.algo == "fedavg":
            avg = np.zeros(self.model_size, dtype=np.float64)
            for node in self.nodes:
                avg += node.w.data
            avg /= len(self.nodes)
            base.params.data[...] = avg.astype(base.dtype)
        states = base.state_arrays()
        if states:
            for idx, (key, arr) in enumerate(states):
                acc = np.zeros_like(arr, dtype=np.float64)
                for node in self.nodes:
                    acc += node.model.state_arrays()[idx][1]
                arr[...] = (acc / len(self.nodes)).astype(arr.dtype)
        return base

    def _train_subset_acc(self, node: NodeState, tick: int, subset: int = 512) -> float:
        idx = self.plan.partition_indices(node.node_id)
        rng = np.random.default_rng([self.config.seed_sampling, 101, tick, node.node_id])
        take = min(subset, len(idx))
        pick = rng.choice(len(idx), size=take, replace=False)
        sel = idx[pick]
        return node.model.evaluate(self.dataset.x[sel], self.dataset.y[sel])

    def evaluate_epoch(self, log: MetricsLog, epoch: int) -> None:
        xv, yv = self.dataset.val_xy()
        have_val = len(yv) > 0
        if self.sync.algo == "gaia":
            accs = []
            for node in self.nodes:
                if have_val:
                    acc = node.model.evaluate(xv, yv)
                    log.log(epoch, self.step, node.node_id, "val_acc", acc)
                    accs.append(acc)
            if accs:
                log.log(epoch, self.step, -1, "val_acc", float(np.mean(accs)))
        elif have_val:
            log.log(epoch, self.step, -1, "val_acc", self.global_eval_model().evaluate(xv, yv))
        total_sent = 0
        for node in self.nodes:
            acc = self._train_subset_acc(node, epoch)
            node.cached_train_acc = acc
            log.log(epoch, self.step, node.node_id, "train_acc", acc)
            if node.v is not None:
                log.log(
                    epoch, self.step, node.node_id, "residual_delta",
                    residual_update_delta(node.v, node.w),
                )
            log.log(epoch, self.step, node.node_id, "comm_values_sent", node.ledger.values_sent)
            total_sent += node.ledger.values_sent
        if self.sync.algo == "fedavg" and math.isfinite(self.last_local_delta):
            log.log(epoch, self.step, -1, "local_delta", self.last_local_delta)
        log.log(epoch, self.step, -1, "comm_values_sent", total_sent)

    # -- full run -----------------------------------------------------------

    def run(self, log: MetricsLog | None = None, trace=None, trace_every: int = 0,
            event_hook=None) -> MetricsLog:
        """Trains to completion (or divergence).

        ``event_hook(cluster, log)`` runs after every superstep; the adaptive
        controller uses it to interleave probe/tune events.
        """
        log = log if log is not None else MetricsLog()
        self._last_good = checkpoint_bytes(self)
        while self.step < self.total_steps and not self.diverged:
            self.superstep(log)
            if trace is not None and trace_every and self.step % trace_every == 0:
                trace.record(self.step, self.nodes[0].w.data)
            completed = self.epoch_index()
            if completed > self._last_eval_epoch:
                if completed % self.config.eval_every == 0 or completed >= self.config.epochs:
                    self.evaluate_epoch(log, completed)
                self._last_eval_epoch = completed
                if not self.diverged:
                    self._last_good = checkpoint_bytes(self)
            if event_hook is not None:
                event_hook(self, log)
        self.finalize_summary(log)
        return log

    def finalize_summary(self, log: MetricsLog) -> None:
        cfg = self.config
        summary = {
            "tag": cfg.tag or f"{cfg.arch}-{cfg.norm}-{cfg.algo}-a{cfg.skew_fraction:g}",
            "arch": cfg.arch,
            "norm": cfg.norm,
            "algo": cfg.algo,
            "skew_fraction": cfg.skew_fraction,
            "nodes": cfg.nodes,
            "model_size": self.model_size,
            "epochs": cfg.epochs,
            "steps": self.step,
            "steps_per_epoch": self.steps_per_epoch,
            "final_val_acc": log.last("val_acc", node=-1),
            "total_values_sent": sum(n.ledger.values_sent for n in self.nodes),
            "total_values_received": sum(n.ledger.values_received for n in self.nodes),
            "values_sent_per_node": [n.ledger.values_sent for n in self.nodes],
            "rounds": self.nodes[0].ledger.rounds,
            "diverged": self.diverged,
            "terminal_step": self.step if self.diverged else None,
            "seed_data": cfg.seed_data,
            "seed_init": cfg.seed_init,
            "seed_sampling": cfg.seed_sampling,
            "dtype": cfg.dtype,
        }
        if self.sync.algo == "gaia":
            summary["final_val_acc_per_node"] = [
                log.last("val_acc", node=k) for k in range(cfg.nodes)
            ]
        log.summary.update(summary)


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None,
                   log: MetricsLog | None = None) -> MetricsLog:
    return Cluster(config, dataset=dataset).run(log=log)


# -- checkpointing ----------------------------------------------------------


def checkpoint_bytes(cluster: Cluster) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.string("cluster")
    w.string(cluster.config.to_json())
    w.string(cluster.nodes[0].model.spec.to_json())
    w.u64(cluster.step)
    w.u64(cluster.nonfinite_streak)
    w.u32(int(cluster.diverged))
    w.u64(cluster._last_eval_epoch)
    w.f64(cluster.last_local_delta)
    w.f64(cluster.sync.gaia_t0)
    w.u64(cluster.sync.fedavg_iter_local)
    w.u64(cluster.sync.dgc_e_warm)
    w.u32(len(cluster.nodes))
    for node in cluster.nodes:
        w.array(node.w.data)
        w.array(node.opt.u.data)
        w.u32(int(node.v is not None))
        if node.v is not None:
            w.array(node.v.data)
        states = node.model.state_arrays()
        w.u32(len(states))
        for key, arr in states:
            w.string(key)
            w.array(arr)
        sampler_state = node.sampler.state()
        w.string(json.dumps(sampler_state["rng"], sort_keys=True))
        w.array(sampler_state["perm"])
        w.u64(sampler_state["cursor"])
        w.u64(sampler_state["cycles"])
        w.u64(node.ledger.values_sent)
        w.u64(node.ledger.values_received)
        w.u64(node.ledger.rounds)
        w.f64(math.nan if node.cached_train_acc is None else node.cached_train_acc)
    w.u64(cluster._moment_count)
    w.u32(len(cluster._slot_channels))
    for i in range(len(cluster.nodes)):
        for slot in range(len(cluster._slot_channels)):
            w.array(cluster._moment_sum[i][slot])
    return w.getvalue()


def save_checkpoint(cluster: Cluster, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(cluster))


def cluster_from_bytes(data: bytes, dataset: Dataset | None = None) -> Cluster:
    r = Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    kind = r.string()
    if kind != "cluster":
        raise FormatError(f"expected a cluster checkpoint, found {kind!r}")
    config = config_from_json(r.string())
    r.string()  # model spec echo; the rebuilt cluster derives the same one
    cluster = Cluster(config, dataset=dataset)
    cluster.step = r.u64()
    cluster.nonfinite_streak = r.u64()
    cluster.diverged = bool(r.u32())
    cluster._last_eval_epoch = r.u64()
    cluster.last_local_delta = r.f64()
    cluster.sync.gaia_t0 = r.f64()
    cluster.sync.fedavg_iter_local = r.u64()
    cluster.sync.dgc_e_warm = r.u64()
    count = r.u32()
    if count != len(cluster.nodes):
        raise FormatError("checkpoint node count does not match the config")
    for node in cluster.nodes:
        node.w.data[...] = r.array()
        node.opt.u.data[...] = r.array()
        if r.u32():
            node.v.data[...] = r.array()
        for _ in range(r.u32()):
            key = r.string()
            arr = r.array()
            dict(node.model.state_arrays())[key][...] = arr
        rng_state = json.loads(r.string())
        perm = r.array()
        cursor = r.u64()
        cycles = r.u64()
        node.sampler.restore(
            {"rng": rng_state, "perm": perm, "cursor": cursor, "cycles": cycles}
        )
        node.ledger.values_sent = r.u64()
        node.ledger.values_received = r.u64()
        node.ledger.rounds = r.u64()
        acc = r.f64()
        node.cached_train_acc = None if math.isnan(acc) else acc
    cluster._moment_count = r.u64()
    slots = r.u32()
    if slots != len(cluster._slot_channels):
        raise FormatError("checkpoint norm-slot count does not match the model")
    for i in range(len(cluster.nodes)):
        for slot in range(slots):
            cluster._moment_sum[i][slot][...] = r.array()
    if not r.done():
        raise FormatError("trailing bytes after checkpoint payload")
    return cluster


def load_checkpoint(path: str, dataset: Dataset | None = None) -> Cluster:
    with open(path, "rb") as fh:
        return cluster_from_bytes(fh.read(), dataset=dataset)
