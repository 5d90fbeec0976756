"""Optimizers and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    """``step_drop``: initial, times ``factor`` from ``drop_iter`` on.
    ``exp_epoch``: initial * rate**epoch."""

    kind: str
    initial: float
    drop_iter: Optional[int] = None
    factor: float = 0.1
    rate: float = 0.99

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError(f"initial learning rate must be > 0, got {self.initial}")
        if self.kind == "step_drop":
            if self.drop_iter is None or self.drop_iter < 0:
                raise ValueError("step_drop needs a non-negative drop_iter")
            if not 0 < self.factor < 1:
                raise ValueError(f"drop factor must lie in (0, 1), got {self.factor}")
        elif self.kind == "exp_epoch":
            if not 0 < self.rate < 1:
                raise ValueError(f"decay rate must lie in (0, 1), got {self.rate}")
        elif self.kind != "constant":
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: LrSchedule, index: int) -> float:
    """Learning rate at an iteration (step_drop) or epoch (exp_epoch)."""
    if index < 0:
        raise ValueError(f"schedule index must be >= 0, got {index}")
    if schedule.kind == "step_drop":
        return schedule.initial * schedule.factor if index >= schedule.drop_iter else schedule.initial
    if schedule.kind == "exp_epoch":
        return schedule.initial * schedule.rate**index
    return schedule.initial


@dataclass
class OptimizerState:
    kind: str  # "adam" | "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    buffers: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def init_state(kind: str, params: Sequence[np.ndarray], **hyper) -> OptimizerState:
    state = OptimizerState(kind, **hyper)
    if kind == "adam":
        state.buffers = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
    else:
        state.buffers = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    lr: float,
) -> None:
    """Update ``params`` in place.

    sgd_momentum: v <- m*v + g; w <- w - lr*v.
    adam: bias-corrected first and second moments.
    """
    if len(params) != len(grads) or len(params) != len(state.buffers):
        raise ValueError(
            f"optimizer_step: {len(params)} params, {len(grads)} grads, {len(state.buffers)} state buffers"
        )
    state.step += 1
    t = state.step
    for i, (w, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"optimizer_step: grad shape {g.shape} does not match parameter {w.shape}")
        if state.kind == "sgd_momentum":
            v = state.buffers[i]
            v *= state.momentum
            v += g
            w -= (lr * v).astype(w.dtype, copy=False)
        else:
            m, v = state.buffers[i]
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            mhat = m / (1 - state.beta1**t)
            vhat = v / (1 - state.beta2**t)
            w -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(w.dtype, copy=False)
