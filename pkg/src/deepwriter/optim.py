"""Mini-batch SGD with momentum, coupled weight decay and a step schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from decimal import Decimal
from typing import Dict, Mapping

import numpy as np

from .errors import DomainError, ShapeError
from .layers import LayerParams


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation hyperparameters. Defaults are the from-scratch recipe."""

    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 1e-2
    lr_drop_factor: float = 0.1
    lr_step: int = 100_000
    stop_iter: int = 400_000
    seed: int = 0
    classifier_lr_mult: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be >= 0")
        if self.base_lr <= 0:
            raise DomainError("base_lr must be > 0")
        if self.lr_step < 1 or self.stop_iter < 1:
            raise DomainError("lr_step and stop_iter must be >= 1")
        if self.classifier_lr_mult <= 0:
            raise DomainError("classifier_lr_mult must be > 0")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        """Transfer recipe: lr 1e-3 dropped every 20K, stop at 40K, classifier x10."""
        base = cls(base_lr=1e-3, lr_step=20_000, stop_iter=40_000, classifier_lr_mult=10.0)
        return replace(base, **overrides)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate in effect at ``iteration`` (0-based)."""
    if iteration < 0 or iteration >= config.stop_iter:
        raise DomainError(f"iteration {iteration} outside [0, {config.stop_iter})")
    drops = iteration // config.lr_step
    # Decimal arithmetic so 1e-2 * 0.1**3 is exactly 1e-5 rather than 1.0000000000000003e-05.
    return float(Decimal(repr(config.base_lr)) * Decimal(repr(config.lr_drop_factor)) ** drops)


@dataclass
class OptimState:
    velocities: Dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, LayerParams]) -> "OptimState":
        vel = {}
        for name, p in params.items():
            vel[f"{name}.weight"] = np.zeros_like(p.weights)
            vel[f"{name}.bias"] = np.zeros_like(p.biases)
        return cls(vel, 0)


def sgd_update(params: Mapping[str, LayerParams], grads: Mapping[str, np.ndarray],
               state: OptimState, config: TrainConfig) -> OptimState:
    """One momentum step, updating ``params`` and ``state`` in place.

    ``grads`` is keyed like the velocities (``"<layer>.weight"``,
    ``"<layer>.bias"``). Per parameter::

        g' = g + weight_decay * p
        v  = momentum * v + lr * lr_mult * g'
        p  = p - v
    """
    lr = lr_at(state.iteration, config)
    for name, layer in params.items():
        step_lr = lr * layer.lr_mult
        for suffix, p in (("weight", layer.weights), ("bias", layer.biases)):
            key = f"{name}.{suffix}"
            g = grads[key]
            v = state.velocities[key]
            if g.shape != p.shape or v.shape != p.shape:
                raise ShapeError(
                    f"{key}: grad {list(g.shape)} / velocity {list(v.shape)} "
                    f"vs param {list(p.shape)}")
            if config.weight_decay:
                g = g + p.dtype.type(config.weight_decay) * p
            v *= p.dtype.type(config.momentum)
            v += p.dtype.type(step_lr) * g
            p -= v
    state.iteration += 1
    return state

