"""Optimizers, learning-rate schedule, and gradient accumulation.

Three update rules: plain Nesterov SGD, Nesterov SGD with layer-wise trust
ratios (LARC-style clipping), and AdamW with decoupled weight decay.
Parameters are updated in place so model objects keep their array references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidParameterError, ShapeMismatchError, TrainingDivergenceError

OPTIMIZER_KINDS = ("sgd_nesterov", "sgd_larc", "adamw")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 0.001  # sgd_larc only
    beta1: float = 0.9  # adamw only
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    bufs: list[np.ndarray] = field(default_factory=list)  # momentum / first moment
    second: list[np.ndarray] = field(default_factory=list)  # adamw second moment

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise InvalidParameterError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise InvalidParameterError("lr must be positive")
        if self.weight_decay < 0:
            raise InvalidParameterError("weight_decay must be nonnegative")


def init_optimizer(kind: str, params: Sequence[np.ndarray], lr: float, **kw) -> OptimizerState:
    state = OptimizerState(kind=kind, lr=lr, **kw)
    state.bufs = [np.zeros_like(p) for p in params]
    if kind == "adamw":
        state.second = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr_now: float,
) -> OptimizerState:
    """Apply one update in place. lr_now = 0 leaves parameters untouched."""
    if lr_now < 0:
        raise InvalidParameterError("lr_now must be nonnegative")
    if len(params) != len(state.bufs) or len(grads) != len(params):
        raise ShapeMismatchError("params/grads/buffers are not parallel lists")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient in optimizer_step")

    if state.kind == "adamw":
        state.step_count += 1
        t = state.step_count
        bc1 = 1.0 - state.beta1**t
        bc2 = 1.0 - state.beta2**t
        for p, g, m, v in zip(params, grads, state.bufs, state.second):
            if state.weight_decay:
                p -= lr_now * state.weight_decay * p
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            p -= lr_now * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        return state

    state.step_count += 1
    for p, g, buf in zip(params, grads, state.bufs):
        d = g + state.weight_decay * p if state.weight_decay else g
        lr_eff = lr_now
        if state.kind == "sgd_larc":
            w_norm = float(np.linalg.norm(p))
            d_norm = float(np.linalg.norm(d))
            # zero-norm layers (fresh biases) fall back to the global lr
            if w_norm > 0.0 and d_norm > 0.0:
                trust = state.trust_coefficient * w_norm / d_norm
                lr_eff = min(trust, lr_now)
        buf *= state.momentum
        buf += d
        p -= lr_eff * (d + state.momentum * buf)
    return state


@dataclass
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    kind: str = "cosine"  # cosine | constant

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidParameterError("base_lr must be positive")
        if self.kind not in ("cosine", "constant"):
            raise InvalidParameterError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise InvalidParameterError("need 0 <= warmup_steps <= total_steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if step < 0 or step > schedule.total_steps:
        raise InvalidParameterError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if schedule.kind == "constant":
        return schedule.base_lr
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return 0.0
    progress = (step - schedule.warmup_steps) / span
    lr = schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return 0.0 if lr <= 1e-8 * schedule.base_lr else lr


class GradAccumulator:
    """Running sum of gradient lists; flush returns the mean and resets."""

    def __init__(self):
        self._sums: list[np.ndarray] | None = None
        self.count = 0

    def add(self, grads: Sequence[np.ndarray]) -> None:
        if self._sums is None:
            self._sums = [np.array(g, dtype=np.float64, copy=True) for g in grads]
        else:
            if len(grads) != len(self._sums):
                raise ShapeMismatchError("gradient list length changed between accumulations")
            for s, g in zip(self._sums, grads):
                s += g
        self.count += 1

    def flush(self) -> list[np.ndarray]:
        if self.count == 0 or self._sums is None:
            raise InvalidParameterError("flush before any accumulation")
        mean = [s / self.count for s in self._sums]
        self._sums = None
        self.count = 0
        return mean
