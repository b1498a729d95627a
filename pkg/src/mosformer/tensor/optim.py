"""SGD with momentum and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from ..exceptions import DimensionError, InputError
from .core import Parameter


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr <= 0:
            raise InputError(f"lr must be positive, got {self.lr}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """One in-place heavy-ball step on raw arrays.

    ``v <- mu*v + g + wd*theta`` followed by ``theta <- theta - lr*v``.
    Velocities are created lazily as zeros on the first call.
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise DimensionError("params, grads and velocities must align")
    for theta, g, v in zip(params, grads, state.velocity):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise DimensionError(f"shape mismatch in sgd_step: {theta.shape}, {g.shape}, {v.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * theta
        theta -= state.lr * v


class SGD:
    """Optimizer over :class:`Parameter` objects; parameters without a gradient are skipped."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.state = OptimState(lr=lr, momentum=momentum, weight_decay=weight_decay)
        self.state.velocity = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        if value <= 0:
            raise InputError(f"lr must be positive, got {value}")
        self.state.lr = value

    def step(self) -> None:
        active = [i for i, p in enumerate(self.params) if p.grad is not None]
        sub = OptimState(
            lr=self.state.lr,
            momentum=self.state.momentum,
            weight_decay=self.state.weight_decay,
            velocity=[self.state.velocity[i] for i in active],
        )
        sgd_step([self.params[i].data for i in active], [self.params[i].grad for i in active], sub)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 3e-2
    lr_min: float = 5e-3
    warmup_epochs: int = 5
    total_epochs: int = 300

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise InputError("need 0 < lr_min <= lr_max")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise InputError("need 0 <= warmup_epochs < total_epochs")


def lr_at(epoch: int, sched: LrSchedule) -> float:
    """Learning rate for ``epoch``: linear warmup from lr_min, then cosine decay to lr_min.

    The cosine phase spans epochs ``warmup_epochs .. total_epochs - 1`` so the
    last epoch lands exactly on ``lr_min``.
    """
    if not 0 <= epoch < sched.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    span = sched.lr_max - sched.lr_min
    if epoch < sched.warmup_epochs:
        return sched.lr_min + span * epoch / sched.warmup_epochs
    cosine_len = sched.total_epochs - 1 - sched.warmup_epochs
    progress = (epoch - sched.warmup_epochs) / cosine_len if cosine_len > 0 else 0.0
    return sched.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * progress))
