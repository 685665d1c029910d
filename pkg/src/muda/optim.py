"""Parameter update rules: Adam and SGD with momentum.

Weight decay is decoupled: it is added to the update step directly and
never enters the gradient moments. Each optimizer owns moment buffers
for exactly the parameters it was scoped to at construction.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .layers import Parameter


def zero_grad(params: list[Parameter]) -> None:
    for p in params:
        p.zero_grad()


class Adam:
    def __init__(
        self,
        params: list[Parameter],
        lr: float,
        *,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.value -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value)

    def state(self) -> dict:
        return {
            "kind": "adam",
            "t": self.t,
            "m": [b.copy() for b in self.m],
            "v": [b.copy() for b in self.v],
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.asarray(b, dtype=float).reshape(p.value.shape) for b, p in zip(state["m"], self.params)]
        self.v = [np.asarray(b, dtype=float).reshape(p.value.shape) for b, p in zip(state["v"], self.params)]


class SGD:
    def __init__(
        self,
        params: list[Parameter],
        lr: float,
        *,
        weight_decay: float = 0.0,
        momentum: float = 0.9,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.t = 0
        self.buf = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            self.buf[i] = self.momentum * self.buf[i] + p.grad
            p.value -= self.lr * (self.buf[i] + self.weight_decay * p.value)

    def state(self) -> dict:
        return {"kind": "sgd", "t": self.t, "buf": [b.copy() for b in self.buf]}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.buf = [np.asarray(b, dtype=float).reshape(p.value.shape) for b, p in zip(state["buf"], self.params)]


def make_optimizer(kind: str, params: list[Parameter], lr: float, *, weight_decay: float = 0.0, **kwargs):
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay, **kwargs)
    if kind == "sgd":
        return SGD(params, lr, weight_decay=weight_decay, **kwargs)
    raise ConfigError(f"unknown optimizer kind {kind!r}")
