from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import DTYPE


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Gradients are cleared after every step. Parameters without a gradient
    still decay.
    """

    def __init__(self, params: ParamStore, lr: float, weight_decay: float = 0.0, momentum: float = 0.9):
        if lr < 0 or weight_decay < 0 or not 0 <= momentum < 1:
            raise ValueError(f"invalid SGD hyperparameters lr={lr}, weight_decay={weight_decay}, momentum={momentum}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        lr, wd, mom = DTYPE(self.lr), DTYPE(self.weight_decay), DTYPE(self.momentum)
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            d = g + wd * p.data if self.weight_decay else g
            v = self.velocity.get(name)
            v = d.copy() if v is None else mom * v + d
            self.velocity[name] = v
            if self.lr:
                p.data -= lr * v
            p.grad = None


def sgd_step(params: ParamStore, lr: float, weight_decay: float, momentum: float, state: dict) -> None:
    """One functional SGD update; ``state`` holds per-parameter velocities."""
    opt = SGD(params, lr, weight_decay, momentum)
    opt.velocity = state
    opt.step()
