"""Adam and SGD-momentum with coupled L2 weight decay, state kept per key."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_at: float | None = None  # fraction of the budget where lr is multiplied
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")

    def lr_at(self, iteration: int, total: int) -> float:
        if self.decay_at is not None and total > 0 and iteration >= self.decay_at * total:
            return self.lr * self.decay_factor
        return self.lr


@dataclass
class Optimizer:
    """Updates arrays in place.  ``key`` selects an independent state slot."""

    spec: OptimizerSpec
    slots: dict = field(default_factory=dict)

    def update(self, key: str, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: float | None = None) -> None:
        s = self.spec
        lr = s.lr if lr is None else lr
        slot = self.slots.setdefault(key, {"t": 0, "m": {}, "v": {}})
        slot["t"] += 1
        t = slot["t"]
        for name, w in params.items():
            g = grads[name]
            if s.weight_decay:
                g = g + s.weight_decay * w
            if s.kind == "sgd":
                buf = slot["m"].get(name)
                buf = g.copy() if buf is None else s.momentum * buf + g
                slot["m"][name] = buf
                w -= lr * buf
            else:
                m = slot["m"].get(name, 0.0) * s.beta1 + (1 - s.beta1) * g
                v = slot["v"].get(name, 0.0) * s.beta2 + (1 - s.beta2) * g * g
                slot["m"][name], slot["v"][name] = m, v
                mhat = m / (1 - s.beta1 ** t)
                vhat = v / (1 - s.beta2 ** t)
                w -= lr * mhat / (np.sqrt(vhat) + s.adam_eps)
