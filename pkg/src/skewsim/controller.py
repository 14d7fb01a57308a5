"""Adaptive communication control.

Periodically trades models between partitions to estimate how much accuracy
a node's model loses on someone else's data, then walks the active sync
algorithm's aggressiveness knob along a fixed grid to the cheapest setting
whose loss stays under budget. The objective is

    score = lambda_al * max(0, AL - sigma_al) + lambda_c * C / CM

where C is the per-node per-step average of values sent since the previous
tuning event and CM is the model size, so the communication term is 1.0 for
a fully synchronous run and the loss hinge dominates whenever it is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import Cluster, MetricsLog
from .config import ExperimentConfig
from .errors import ConfigError
from .metrics import AccuracyLossReport

TUNERS = ("hill_climb", "stochastic_hill_climb", "simulated_annealing")

# knob grids ordered conservative -> aggressive (more comm -> less comm)
DEFAULT_GRIDS = {
    "gaia": (0.02, 0.05, 0.10, 0.20, 0.30, 0.40),
    "fedavg": (5, 10, 20, 50, 200),
    "dgc": (8, 4, 3, 2, 1),
}


@dataclass
class ControllerConfig:
    tuner: str = "hill_climb"
    lambda_al: float = 50.0
    lambda_c: float = 1.0
    sigma_al: float = 0.05
    travel_period: int = 500
    theta_grid: tuple = ()  # empty selects the active algorithm's default grid
    sa_temp0: float = 1.0
    sa_decay: float = 0.9
    memo_ttl: int = 6  # events before a measurement is considered stale
    subset_size: int = 512
    aggregate: str = "max"  # max | mean over traveled pairs
    seed: int = 0

    def __post_init__(self):
        if self.tuner not in TUNERS:
            raise ConfigError(f"unknown tuner {self.tuner!r}")
        if not 0.0 < self.sigma_al < 1.0:
            raise ConfigError("sigma_al must lie in (0, 1)")
        if self.travel_period < 1:
            raise ConfigError("travel_period must be positive")
        if self.aggregate not in ("max", "mean"):
            raise ConfigError("aggregate must be 'max' or 'mean'")
        if self.memo_ttl < 1:
            raise ConfigError("memo_ttl must be positive")

    def grid_for(self, algo: str) -> tuple:
        if self.theta_grid:
            return tuple(self.theta_grid)
        if algo not in DEFAULT_GRIDS:
            raise ConfigError(f"algorithm {algo!r} has no tunable knob")
        return DEFAULT_GRIDS[algo]


@dataclass
class Measurement:
    accuracy_loss: float
    comm: float  # per-node per-step values sent since the previous event
    objective: float
    event: int


@dataclass
class TunerState:
    grid: tuple
    idx: int
    memo: dict[int, Measurement] = field(default_factory=dict)
    moves: list[dict] = field(default_factory=list)
    temp: float = 1.0
    event: int = 0

    @property
    def theta(self):
        return self.grid[self.idx]

    def prune(self, ttl: int) -> None:
        stale = [i for i, m in self.memo.items() if self.event - m.event >= ttl]
        for i in stale:
            del self.memo[i]


def objective(al: float, c: float, cm: float, cfg: ControllerConfig) -> float:
    if cm <= 0:
        raise ConfigError("CM must be positive")
    return cfg.lambda_al * max(0.0, al - cfg.sigma_al) + cfg.lambda_c * c / cm


def model_travel(cluster: Cluster, event: int, subset_size: int = 512,
                 seed: int = 0) -> list[AccuracyLossReport]:
    """One traveling round: every model is scored on one remote partition.

    The rotation offset advances with the event index and never lands on the
    owner, so over K-1 consecutive events each node sees every remote.
    Both the local and the traveled model are evaluated on the same seeded
    subset of the remote partition, so identical replicas report zero loss.
    """
    k = len(cluster.nodes)
    if k < 2:
        raise ConfigError("model traveling needs at least two nodes")
    r = 1 + (event % (k - 1))
    reports = []
    for node in cluster.nodes:
        target = (node.node_id + r) % k
        idx = cluster.plan.partition_indices(target)
        rng = np.random.default_rng([seed, 202, event, target])
        take = min(subset_size, len(idx))
        pick = rng.choice(len(idx), size=take, replace=False)
        x = cluster.dataset.x[idx[pick]]
        y = cluster.dataset.y[idx[pick]]
        local_acc = cluster.nodes[target].model.evaluate(x, y)
        remote_acc = node.model.evaluate(x, y)
        reports.append(
            AccuracyLossReport(
                source_node=node.node_id,
                target_node=target,
                local_acc=local_acc,
                remote_acc=remote_acc,
                sample_count=take,
            )
        )
    return reports


def aggregate_loss(reports: list[AccuracyLossReport], how: str) -> float:
    losses = [r.accuracy_loss for r in reports]
    return float(max(losses) if how == "max" else np.mean(losses))


def _improving(state: TunerState, current: float) -> list[tuple[int, float]]:
    out = []
    for nb in (state.idx - 1, state.idx + 1):
        if 0 <= nb < len(state.grid) and nb in state.memo:
            obj = state.memo[nb].objective
            if obj < current:
                out.append((nb, obj))
    return out


def _explore_target(state: TunerState, al: float, sigma_al: float) -> int | None:
    """Unmeasured neighbor on the side the loss hinge points to."""
    side = -1 if al > sigma_al else 1
    nb = state.idx + side
    if 0 <= nb < len(state.grid) and nb not in state.memo:
        return nb
    return None


def tune_step(state: TunerState, measurement: Measurement, cfg: ControllerConfig,
              rng: np.random.Generator) -> int:
    """Records the current measurement and returns the next grid index."""
    state.memo[state.idx] = measurement
    state.prune(cfg.memo_ttl)
    current = measurement.objective
    here = state.idx
    if cfg.tuner == "simulated_annealing":
        options = [nb for nb in (here - 1, here + 1) if 0 <= nb < len(state.grid)]
        nb = int(rng.choice(options))
        if nb not in state.memo:
            accept, kind = True, "explore"
        else:
            delta = state.memo[nb].objective - current
            prob = 1.0 if delta <= 0 else math.exp(-delta / max(state.temp, 1e-12))
            accept = rng.random() < prob
            kind = "anneal"
        state.temp *= cfg.sa_decay
        if accept:
            to_obj = state.memo[nb].objective if kind == "anneal" else math.nan
            state.moves.append(
                {"event": state.event, "from": here, "to": nb, "kind": kind,
                 "from_objective": current, "to_objective": to_obj}
            )
            state.idx = nb
    else:
        improving = _improving(state, current)
        if improving:
            if cfg.tuner == "hill_climb":
                nb, obj = min(improving, key=lambda t: (t[1], t[0]))
            else:
                nb, obj = improving[int(rng.integers(len(improving)))]
            state.moves.append(
                {"event": state.event, "from": here, "to": nb, "kind": "improve",
                 "from_objective": current, "to_objective": obj}
            )
            state.idx = nb
        else:
            nb = _explore_target(state, measurement.accuracy_loss, cfg.sigma_al)
            if nb is not None:
                state.moves.append(
                    {"event": state.event, "from": here, "to": nb, "kind": "explore",
                     "from_objective": current, "to_objective": math.nan}
                )
                state.idx = nb
    state.event += 1
    return state.idx


def apply_theta(cluster: Cluster, theta) -> None:
    algo = cluster.sync.algo
    if algo == "gaia":
        cluster.sync.gaia_t0 = float(theta)
    elif algo == "fedavg":
        cluster.sync.fedavg_iter_local = int(theta)
    elif algo == "dgc":
        cluster.sync.dgc_e_warm = int(theta)
    else:
        raise ConfigError(f"algorithm {algo!r} has no tunable knob")


def current_theta(cluster: Cluster):
    algo = cluster.sync.algo
    if algo == "gaia":
        return cluster.sync.gaia_t0
    if algo == "fedavg":
        return cluster.sync.fedavg_iter_local
    if algo == "dgc":
        return cluster.sync.dgc_e_warm
    raise ConfigError(f"algorithm {algo!r} has no tunable knob")


class AdaptiveController:
    """Drives travel/tune events on the barrier between supersteps.

    Tuning starts from the grid point nearest the configured knob value, so
    the sync config picks the initial operating point and the grid only has
    to bracket the range worth exploring.
    """

    def __init__(self, cluster: Cluster, cfg: ControllerConfig):
        self.cluster = cluster
        self.cfg = cfg
        grid = cfg.grid_for(cluster.sync.algo)
        start = current_theta(cluster)
        idx = min(range(len(grid)), key=lambda i: (abs(grid[i] - start), i))
        self.state = TunerState(grid=grid, idx=idx, temp=cfg.sa_temp0)
        self.rng = np.random.default_rng([cfg.seed, 303])
        self.travel_values = 0
        self.reports: list[list[AccuracyLossReport]] = []
        self._last_mark = 0
        self._last_step = 0
        self._next_event = cfg.travel_period
        apply_theta(cluster, self.state.theta)

    def _window_comm(self) -> float:
        sent = sum(n.ledger.values_sent for n in self.cluster.nodes)
        window = sent - self._last_mark
        steps = self.cluster.step - self._last_step
        self._last_mark = sent
        self._last_step = self.cluster.step
        if steps <= 0:
            return 0.0
        return window / (steps * len(self.cluster.nodes))

    def on_superstep(self, cluster: Cluster, log: MetricsLog) -> None:
        if cluster.step < self._next_event:
            return
        self._next_event = (cluster.step // self.cfg.travel_period + 1) * self.cfg.travel_period
        event = self.state.event
        reports = model_travel(cluster, event, self.cfg.subset_size, self.cfg.seed)
        self.reports.append(reports)
        self.travel_values += len(cluster.nodes) * cluster.model_size
        al = aggregate_loss(reports, self.cfg.aggregate)
        comm = self._window_comm()
        score = objective(al, comm, cluster.model_size, self.cfg)
        measurement = Measurement(accuracy_loss=al, comm=comm, objective=score, event=event)
        epoch = cluster.epoch_index()
        log.log(epoch, cluster.step, -1, "accuracy_loss", al)
        log.log(epoch, cluster.step, -1, "objective", score)
        log.log(epoch, cluster.step, -1, "travel_values_sent", self.travel_values)
        tune_step(self.state, measurement, self.cfg, self.rng)
        apply_theta(cluster, self.state.theta)
        log.log(epoch, cluster.step, -1, "theta", float(self.state.theta))

    def finalize(self, log: MetricsLog) -> None:
        log.summary["travel_values_sent"] = self.travel_values
        log.summary["total_values_sent_with_travel"] = (
            log.summary.get("total_values_sent", 0) + self.travel_values
        )
        log.summary["theta_final"] = float(self.state.theta)
        log.summary["tune_events"] = self.state.event
        log.summary["tuner"] = self.cfg.tuner
        log.summary["accepted_moves"] = [
            dict(m) for m in self.state.moves
        ]


def run_tuned(config: ExperimentConfig, controller: ControllerConfig | None = None,
              dataset=None, log: MetricsLog | None = None) -> MetricsLog:
    """Full training run with travel/tune events every travel_period steps."""
    controller = controller if controller is not None else ControllerConfig()
    cluster = Cluster(config, dataset=dataset)
    driver = AdaptiveController(cluster, controller)
    log = cluster.run(log=log, event_hook=driver.on_superstep)
    driver.finalize(log)
    return log
