"""SGD with momentum and Adam, with epoch-milestone learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .tensor import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    kind: Literal["sgd_momentum", "adam"] = "sgd_momentum"
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # (epoch, factor): from that epoch on the rate is multiplied by factor
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        self.schedule = [(int(e), float(f)) for e, f in self.schedule]
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {epochs}")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for milestone, factor in self.schedule:
            if epoch >= milestone:
                lr *= factor
        return lr


class Optimizer:
    """Owns per-parameter state for one training stage.

    ``step`` applies one update to every non-frozen parameter and raises if
    any of them has no gradient.  Frozen parameters are never written.
    """

    def __init__(self, params: Iterable[Parameter], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.lr = config.learning_rate
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params] if config.kind == "adam" else None

    def set_epoch(self, epoch: int) -> None:
        self.lr = self.config.lr_at(epoch)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        cfg = self.config
        live = [(i, p) for i, p in enumerate(self.params) if not p.frozen]
        for _, p in live:
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name or p.shape} has no gradient")
        self.t += 1
        for i, p in live:
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.kind == "sgd_momentum":
                if cfg.momentum:
                    self._m[i] = cfg.momentum * self._m[i] + g
                    g = self._m[i]
                p.data -= self.lr * g
            else:
                self._m[i] = cfg.beta1 * self._m[i] + (1 - cfg.beta1) * g
                self._v[i] = cfg.beta2 * self._v[i] + (1 - cfg.beta2) * g * g
                mhat = self._m[i] / (1 - cfg.beta1**self.t)
                vhat = self._v[i] / (1 - cfg.beta2**self.t)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + cfg.epsilon)

