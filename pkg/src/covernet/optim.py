"""Parameter update rules and the step learning-rate schedule.

The momentum rule is applied literally, per weight::

    v <- 0.9 * v - 0.0005 * lr * w - lr * grad
    w <- w + v

Updates are written in place so parameter arrays keep their identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ShapeError

CONSTANT = math.inf


@dataclass(frozen=True)
class LrSchedule:
    base_rate: float = 0.01
    drop_factor: float = 10.0
    drop_every: float = 100_000

    def __post_init__(self):
        if self.base_rate <= 0:
            raise InvalidParameterError("base_rate must be positive")
        if not self.drop_every > 0:
            raise InvalidParameterError("drop_every must be positive")

    @classmethod
    def constant(cls, rate):
        return cls(base_rate=rate, drop_factor=1.0, drop_every=CONSTANT)


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise InvalidParameterError("step must be non-negative")
    if math.isinf(schedule.drop_every):
        return schedule.base_rate
    drops = int(step // schedule.drop_every)
    return schedule.base_rate / schedule.drop_factor**drops


def _same_shape(w, grad, other=None):
    if w.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {w.shape}", axis="parameter")
    if other is not None and other.shape != w.shape:
        raise ShapeError(f"state shape {other.shape} != parameter shape {w.shape}", axis="state")


def sgd_momentum_step(w, grad, velocity, lr, momentum=0.9, weight_decay=0.0005):
    """One momentum/decay update of ``w`` and ``velocity`` (both in place)."""
    _same_shape(w, grad, velocity)
    velocity[...] = momentum * velocity - (weight_decay * lr) * w - lr * grad
    w += velocity
    return w, velocity


def adam_step(w, grad, m, u, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; ``t`` is the 1-based step index."""
    _same_shape(w, grad, m)
    _same_shape(w, grad, u)
    m[...] = beta1 * m + (1.0 - beta1) * grad
    u[...] = beta2 * u + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    u_hat = u / (1.0 - beta2**t)
    w -= lr * m_hat / (np.sqrt(u_hat) + eps)
    return w, m, u


def _is_bias(name):
    return name.endswith(".b")


@dataclass
class SgdMomentum:
    """Momentum SGD over a dict of named parameters."""

    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_biases: bool = True
    lr_mult: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    iteration: int = 0

    kind = "sgd_momentum"

    def step(self, params, grads, lr):
        for name, w in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(w)
            decay = 0.0 if (_is_bias(name) and not self.decay_biases) else self.weight_decay
            sgd_momentum_step(w, grads[name], v, lr * self.lr_mult.get(name, 1.0), self.momentum, decay)
        self.iteration += 1

    def state_tensors(self):
        return {f"{name}.v": v for name, v in self.velocity.items()}

    def load_state_tensors(self, tensors, iteration):
        self.velocity = {name[: -len(".v")]: np.array(t) for name, t in tensors.items() if name.endswith(".v")}
        self.iteration = iteration


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_mult: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    iteration: int = 0

    kind = "adam"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidParameterError("Adam betas must lie in (0, 1)")

    def step(self, params, grads, lr):
        t = self.iteration + 1
        for name, w in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.u[name] = np.zeros_like(w)
            adam_step(
                w, grads[name], self.m[name], self.u[name], t,
                lr * self.lr_mult.get(name, 1.0), self.beta1, self.beta2, self.eps,
            )
        self.iteration = t

    def state_tensors(self):
        out = {}
        for name in self.m:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.u"] = self.u[name]
        return out

    def load_state_tensors(self, tensors, iteration):
        self.m = {n[:-2]: np.array(t) for n, t in tensors.items() if n.endswith(".m")}
        self.u = {n[:-2]: np.array(t) for n, t in tensors.items() if n.endswith(".u")}
        self.iteration = iteration


def make_optimizer(kind: str, **kwargs):
    if kind == "sgd_momentum":
        return SgdMomentum(**kwargs)
    if kind == "adam":
        return Adam(**kwargs)
    raise InvalidParameterError(f"unknown optimizer {kind!r}")
