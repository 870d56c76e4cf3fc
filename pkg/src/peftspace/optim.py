"""First-order optimisers over a dict of named tensors, and the fine-tuning lr schedule."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


def lr_at(step, total_steps, peak, warmup_ratio):
    """Linear warmup to ``peak`` over ``warmup_ratio`` of the run, then linear decay to zero."""
    warmup = max(1, math.ceil(warmup_ratio * total_steps))
    if step < warmup:
        return peak * (step + 1) / warmup
    return peak * max(0.0, (total_steps - step) / max(1, total_steps - warmup))


class AdamW:
    """Adam with decoupled weight decay over a dict of trainable tensors."""

    def __init__(self, params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.params = params
        self.lr_scale = lr_scale or {}
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= (lr * self.lr_scale.get(name, 1.0) * update).astype(p.data.dtype)
            p.grad = None


class SGD:
    """Plain SGD with heavy-ball momentum."""

    def __init__(self, params, momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {}

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            vel = self.velocity.get(name)
            vel = p.grad.copy() if vel is None else self.momentum * vel + p.grad
            self.velocity[name] = vel
            p.data -= (lr * vel).astype(p.data.dtype)
            p.grad = None


OPTIMIZERS = ("adam", "sgd")


def make_optimizer(name, params, momentum=0.9):
    if name == "adam":
        return AdamW(params, weight_decay=0.0)
    if name == "sgd":
        return SGD(params, momentum)
    raise ConfigError(f"optimizer must be one of {list(OPTIMIZERS)}, got {name!r}")


def clip_gradients(params, max_norm):
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    live = [p for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in live))
    if max_norm and norm > max_norm:
        for p in live:
            p.grad = p.grad * (max_norm / norm)
    return norm
