"""Plain SGD-with-momentum and Adam over flat parameter vectors."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

Array = np.ndarray


def step_size_at(base: float, iteration: int, total: int, schedule: str) -> float:
    """Step size for ``iteration`` in [0, total); constant or cosine-to-zero."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        if total <= 0:
            return base
        frac = min(max(iteration, 0), total) / total
        return 0.5 * base * (1.0 + math.cos(math.pi * frac))
    raise ContractError(f"unknown step schedule {schedule!r}")


class SgdMomentum:
    """v <- mu*v - lr*grad; x <- x + v. ``mu=0`` is vanilla SGD."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = float(momentum)
        self._velocity: Array | None = None

    def step(self, params: Array, grad: Array, lr: float) -> Array:
        if self._velocity is None:
            self._velocity = np.zeros_like(params)
        self._velocity = self.momentum * self._velocity - lr * grad
        return params + self._velocity


class Adam:
    """Standard Adam with bias correction (beta1=0.9, beta2=0.999)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Array | None = None
        self._v: Array | None = None
        self._t = 0

    def step(self, params: Array, grad: Array, lr: float) -> Array:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, momentum: float = 0.9):
    if name == "sgd":
        return SgdMomentum(momentum)
    if name == "adam":
        return Adam()
    raise ContractError(f"unknown optimizer {name!r}")
