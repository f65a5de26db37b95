"""Parameter update rules and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .tensor import Tensor


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    params = list(params)
    if params and isinstance(params[0], tuple):
        return params
    return [(f"param{i}", p) for i, p in enumerate(params)]


def _check_grads(params, grads) -> None:
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for (name, p), g in zip(params, grads):
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")


class _Optimizer:
    def __init__(self, params, lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = _named(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grads(self) -> list[Optional[np.ndarray]]:
        return [p.grad for _, p in self.params]


class SGDMomentum(_Optimizer):
    """Classic (heavy-ball) momentum state: velocities, ``momentum`` and ``lr``."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        super().__init__(params, lr)
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        sgd_momentum_step(self.params, self.grads(), self)


class Adam(_Optimizer):
    """Adam state with bias-corrected first and second moments."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        adam_step(self.params, self.grads(), self)


def sgd_momentum_step(params, grads: Sequence[np.ndarray], state: SGDMomentum) -> None:
    """``v <- mu*v + g`` then ``w <- w - lr*v``, in place.

    With ``mu == 0`` the update is exactly ``w <- w - lr*g``.
    """
    params = _named(params)
    _check_grads(params, grads)
    for (_, p), v, g in zip(params, state.velocity, grads):
        if state.momentum:
            v *= state.momentum
            v += g
            p.data -= state.lr * v
        else:
            v[...] = g
            p.data -= state.lr * g


def adam_step(params, grads: Sequence[np.ndarray], state: Adam) -> None:
    params = _named(params)
    _check_grads(params, grads)
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for (_, p), m, v, g in zip(params, state.m, state.v, grads):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass(frozen=True)
class StepLR:
    """Step decay ``base_lr * gamma ** (epoch // step_size)``."""

    base_lr: float
    step_size: int = 7
    gamma: float = 0.1

    def __post_init__(self):
        if self.step_size < 1:
            raise ValueError(f"step_size must be >= 1, got {self.step_size}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    def rate(self, epoch: int) -> float:
        return lr_at_epoch(self, epoch)


def lr_at_epoch(schedule: StepLR, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    k = epoch // schedule.step_size
    return schedule.base_lr if k == 0 else schedule.base_lr * schedule.gamma**k
