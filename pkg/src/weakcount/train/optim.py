"""SGD with Nesterov momentum and the plateau learning-rate / stopping schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import ModelParameters


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParameters, grads: ModelParameters, state: SGDState, lr: float,
             momentum: float = 0.9, nesterov: bool = True) -> ModelParameters:
    """One update: ``v = mu*v + g``; step along ``g + mu*v`` (Nesterov) or ``v``.

    Parameters are updated in place and returned.
    """
    for name in params:
        g = grads[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(g)
        v = momentum * v + g
        state.velocity[name] = v
        step = g + momentum * v if nesterov else v
        params.tensors[name] -= lr * step
    return params


@dataclass
class PlateauSchedule:
    """Halve the rate after ``patience`` epochs without an improvement above
    ``min_delta``; stop after ``stop_patience`` epochs without any improvement."""

    lr: float
    patience: int = 20
    min_delta: float = 1e-5
    stop_patience: int = 40
    factor: float = 0.5
    best_for_lr: float = np.inf
    best_any: float = np.inf
    since_lr: int = 0
    since_any: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.stop_patience < 1:
            raise ValueError("patience values must be positive")

    def step(self, val_loss: float) -> bool:
        """Record an epoch's validation loss; returns ``True`` when training should stop."""
        if val_loss < self.best_for_lr - self.min_delta:
            self.best_for_lr = val_loss
            self.since_lr = 0
        else:
            self.since_lr += 1
            if self.since_lr >= self.patience:
                self.lr *= self.factor
                self.since_lr = 0
        if val_loss < self.best_any:
            self.best_any = val_loss
            self.since_any = 0
        else:
            self.since_any += 1
        return self.since_any >= self.stop_patience
