"""Adam with bias-corrected moments and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``params`` (numpy arrays) from ``grads``.

    ``state`` holds zero moments before the first call.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        p -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_decay(base_lr: float, step: int, every: int, factor: float = 0.1) -> float:
    """Learning rate multiplied by ``factor`` after every ``every`` steps."""
    if every <= 0:
        return base_lr
    return base_lr * factor ** (step // every)
