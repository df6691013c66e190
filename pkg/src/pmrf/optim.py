"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimizerError(RuntimeError):
    pass


@dataclass
class OptimState:
    """Per-parameter first/second moment buffers plus hyperparameters."""

    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise OptimizerError("lr and eps must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise OptimizerError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise OptimizerError("weight_decay must be non-negative")


def adamw_step(params, state: OptimState, lr: float | None = None):
    """One AdamW update over ``params`` (a name -> Tensor mapping).

    Weight decay is decoupled: parameters shrink by ``lr * wd * p`` directly,
    not through the gradient/moment path. Moments use bias correction.
    """
    if lr is None:
        lr = state.lr
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter '{name}' has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs == 0:
        raise OptimizerError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise OptimizerError(f"epoch {epoch} outside [0, {total_epochs}]")
    if lr0 <= 0:
        raise OptimizerError("lr0 must be positive")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
