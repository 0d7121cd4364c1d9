"""SGD with momentum and Adam.  Only trainable params with a gradient are touched."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .layers import Param


class Optimizer:
    kind = ""

    def __init__(self, params: list[Param]):
        self.params = [p for p in params if p.trainable]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        raise NotImplementedError

    def hyper(self) -> dict:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: dict, step_count: int):
        raise NotImplementedError


class SGD(Optimizer):
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``."""

    kind = "sgd"

    def __init__(self, params, lr=0.01, momentum=0.0):
        super().__init__(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        self.step_count += 1
        for p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v

    def hyper(self):
        return {"lr": self.lr, "momentum": self.momentum}

    def buffers(self):
        return {f"{k}.velocity": v for k, v in self.velocity.items()}

    def load_buffers(self, buffers, step_count):
        for k in self.velocity:
            self.velocity[k][...] = buffers[f"{k}.velocity"]
        self.step_count = step_count


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)).astype(p.value.dtype)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}

    def buffers(self):
        out = {f"{k}.m": a for k, a in self.m.items()}
        out.update({f"{k}.v": a for k, a in self.v.items()})
        return out

    def load_buffers(self, buffers, step_count):
        for k in self.m:
            self.m[k][...] = buffers[f"{k}.m"]
            self.v[k][...] = buffers[f"{k}.v"]
        self.step_count = step_count


def make_optimizer(params, kind: str = "adam", **hyper) -> Optimizer:
    if kind == "adam":
        return Adam(params, **hyper)
    if kind == "sgd":
        return SGD(params, **hyper)
    raise ConfigError(f"unknown optimizer {kind!r}")
