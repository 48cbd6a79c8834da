"""Gradient-descent steps over parameter tensors."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["Adam", "Sgd", "make_optimizer"]


class Adam:
    """Adaptive-moment estimation with bias correction (default coefficients)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        # plain-float scalars: numpy 2 treats np.float64 scalars as strong types
        # and would silently widen float32 parameters
        correction = math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data = p.data - (self.lr * correction) * m / (np.sqrt(v) + self.eps)


class Sgd:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g


def make_optimizer(name: str, params, lr):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return Sgd(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
