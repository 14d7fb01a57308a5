"""Momentum SGD and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .params import ParamVector


@dataclass
class OptState:
    u: ParamVector
    momentum: float = 0.9
    eta: float = 0.01
    weight_decay: float = 0.0


def sgd_momentum_step(opt: OptState, grad: ParamVector) -> ParamVector:
    """Updates the momentum buffer in place: u <- m*u - eta*grad.

    The caller decides what to do with the returned update (apply to the
    local replica, accumulate into a residual, aggregate across nodes).
    """
    opt.u.data *= opt.momentum
    opt.u.data -= opt.eta * grad.data
    return opt.u


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "step"
    eta0: float = 0.01
    # (epoch, divisor) pairs; each divisor applies from its epoch onward
    step_drops: tuple[tuple[int, float], ...] = ()
    poly_power: float = 1.0
    poly_max_iter: int = 1

    def __post_init__(self):
        if self.kind not in ("step", "poly"):
            raise ConfigError(f"unknown lr schedule kind {self.kind!r}")
        if self.eta0 <= 0:
            raise ConfigError("eta0 must be positive")
        epochs = [e for e, _ in self.step_drops]
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ConfigError("step drop epochs must be strictly increasing")
        if self.kind == "poly" and self.poly_max_iter <= 0:
            raise ConfigError("poly schedule needs poly_max_iter > 0")


def lr_at(schedule: LrSchedule, epoch: int, iteration: int) -> float:
    if schedule.kind == "step":
        eta = schedule.eta0
        for drop_epoch, divisor in schedule.step_drops:
            if epoch >= drop_epoch:
                eta /= divisor
        return eta
    if iteration >= schedule.poly_max_iter:
        raise ConfigError(
            f"iteration {iteration} outside poly schedule horizon {schedule.poly_max_iter}"
        )
    return schedule.eta0 * (1.0 - iteration / schedule.poly_max_iter) ** schedule.poly_power
