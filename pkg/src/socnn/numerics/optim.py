"""Adam with bias correction, cosine learning-rate annealing, and the
batch-norm momentum schedule used during training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .tensor import ShapeError


@dataclass
class AdamState:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")


def adam_step(state: AdamState, store: ParamStore, lr: float,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One Adam update of every parameter, in place.

    Gradients default to each parameter's ``.grad``; a parameter without a
    gradient is treated as having a zero gradient.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in store.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)


def cosine_annealing_lr(epoch: int, total_epochs: int, lr_max: float = 1e-3, lr_min: float = 0.0) -> float:
    if total_epochs < 1:
        raise ValueError("total_epochs must be at least 1")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if lr_max < lr_min or lr_min < 0:
        raise ValueError("need lr_max >= lr_min >= 0")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def bn_momentum_at(epoch: int, initial: float = 0.9, every: int = 30, rate: float = 0.5,
                   ceiling: float = 0.999) -> float:
    """Running-stat momentum for ``epoch``.

    The blend weight of new batches, ``1 - momentum``, shrinks by ``rate``
    every ``every`` epochs, so running statistics settle late in training.
    """
    weight = (1.0 - initial) * rate ** (epoch // every)
    return min(1.0 - weight, ceiling)
