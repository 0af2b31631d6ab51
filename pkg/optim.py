"""
Optimizers and early stopping.

SGD with momentum (coupled weight decay), Adam (coupled) and AdamW (decoupled)
update parameter arrays in place. ``EarlyStopper`` tracks the best validation
value and tells the caller when to checkpoint and when to stop.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ('sgd', 'adam', 'adamw')

Params = Dict[str, np.ndarray]


@dataclass
class OptimizerState:
    kind: str
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer '{self.kind}', expected one of {OPTIMIZER_KINDS}")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid optimizer settings lr={self.lr} wd={self.weight_decay} momentum={self.momentum}")

    def buffer(self, name: str, slot: str, like: np.ndarray) -> np.ndarray:
        slots = self.buffers.setdefault(name, {})
        if slot not in slots:
            slots[slot] = np.zeros_like(like)
        return slots[slot]


def _check(params: Params, grads: Params) -> None:
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter '{name}'")
        if grad.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != parameter shape {params[name].shape}")


def sgd_step(params: Params, grads: Params, state: OptimizerState) -> Params:
    """v <- mu v + g (+ wd w); w <- w - lr v."""
    _check(params, grads)
    state.t += 1
    for name, g in grads.items():
        w = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * w
        if state.momentum:
            v = state.buffer(name, 'v', w)
            v *= state.momentum
            v += g
            g = v
        w -= state.lr * g
    return params


def _adam_update(params: Params, grads: Params, state: OptimizerState, coupled_decay: bool) -> None:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        w = params[name]
        if state.weight_decay:
            if coupled_decay:
                g = g + state.weight_decay * w
            else:
                w *= 1.0 - state.lr * state.weight_decay
        m = state.buffer(name, 'm', w)
        v = state.buffer(name, 'v', w)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(params: Params, grads: Params, state: OptimizerState) -> Params:
    """Bias-corrected Adam; weight decay, if any, is added to the gradient."""
    _check(params, grads)
    _adam_update(params, grads, state, coupled_decay=True)
    return params


def adamw_step(params: Params, grads: Params, state: OptimizerState) -> Params:
    """Adam on the raw gradient with decoupled decay w <- w (1 - lr wd)."""
    _check(params, grads)
    _adam_update(params, grads, state, coupled_decay=False)
    return params


_STEPS = {'sgd': sgd_step, 'adam': adam_step, 'adamw': adamw_step}


class Optimizer:
    """Binds an ``OptimizerState`` to a fixed set of named parameter arrays."""

    def __init__(self, params: Params, kind: str, lr: float, weight_decay: float = 0.0,
                 momentum: float = 0.0):
        self.params = dict(params)
        self.state = OptimizerState(kind=kind, lr=lr, weight_decay=weight_decay, momentum=momentum)

    def step(self, grads: Params) -> None:
        _STEPS[self.state.kind](self.params, grads, self.state)

    @property
    def kind(self) -> str:
        return self.state.kind


# ============================================================================
# EARLY STOPPING
# ============================================================================

class StopSignal(enum.Enum):
    IMPROVED = 'improved'
    CONTINUE = 'continue'
    STOP = 'stop'


@dataclass
class EarlyStopper:
    mode: str = 'maximize'
    patience: int = 10
    min_delta: float = 0.0
    best_value: Optional[float] = None
    best_epoch: Optional[int] = None
    stale_count: int = 0

    def __post_init__(self):
        if self.mode not in ('maximize', 'minimize'):
            raise ConfigError(f"early-stopping mode must be maximize or minimize, got '{self.mode}'")
        if self.patience < 0 or self.min_delta < 0:
            raise ConfigError(f"patience and min_delta must be non-negative")

    def is_improvement(self, value: float) -> bool:
        if self.best_value is None:
            return True
        if self.mode == 'maximize':
            return value > self.best_value + self.min_delta
        return value < self.best_value - self.min_delta

    @property
    def should_stop(self) -> bool:
        return self.best_value is not None and self.stale_count >= self.patience


def early_stop_update(stopper: EarlyStopper, epoch: int, value: float) -> StopSignal:
    """
    Record one epoch's validation value. ``IMPROVED`` means the caller should
    checkpoint; ``STOP`` means it should restore the best checkpoint and end.
    """
    if stopper.is_improvement(value):
        stopper.best_value = float(value)
        stopper.best_epoch = epoch
        stopper.stale_count = 0
        return StopSignal.IMPROVED
    stopper.stale_count += 1
    if stopper.stale_count >= stopper.patience:
        return StopSignal.STOP
    return StopSignal.CONTINUE
