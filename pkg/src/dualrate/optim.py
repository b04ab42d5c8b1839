"""Parameter update rules."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    """A registered parameter is missing its gradient."""


def _named(params) -> list[tuple[str, Tensor]]:
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((f"param{i}", p))
    return out


class Sgd:
    """Plain gradient descent: w <- w - lr * g."""

    def __init__(self, params, lr: float):
        self.params = _named(params)
        self.lr = lr
        self.step_count = 0

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise OptimizerError(f"parameter '{name}' has no gradient; run backward first")
        for _, p in self.params:
            p.data -= self.lr * p.grad
            p.grad = None
        self.step_count += 1


class Adam:
    """Adaptive-moment descent with bias correction."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = _named(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.step_count = 0

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise OptimizerError(f"parameter '{name}' has no gradient; run backward first")
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.grad = None


def make_optimizer(kind: str, params, lr: float):
    if kind == "sgd":
        return Sgd(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind '{kind}' (expected 'sgd' or 'adam')")
