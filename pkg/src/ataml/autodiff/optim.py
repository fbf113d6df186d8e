"""Gradient clipping and the Adam update used by the meta-learner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .tensor import ContractViolation, Tensor


def global_norm_value(grads: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, Tensor], max_norm: float) -> dict:
    """Scale every gradient by max_norm/global_norm when the joint norm exceeds max_norm."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    names = list(grads)
    clipped = ops.clip_by_global_norm([grads[n] for n in names], max_norm)
    return dict(zip(names, clipped))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def check(self, params: Mapping[str, Tensor]) -> None:
        for name, moments in (("m", self.m), ("v", self.v)):
            for key, arr in moments.items():
                if key in params and arr.shape != params[key].shape:
                    raise ContractViolation(
                        f"Adam {name}[{key!r}] has shape {arr.shape}, parameter has {params[key].shape}"
                    )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update (bias corrected) of every parameter named in ``grads``."""
    if lr <= 0:
        raise ContractViolation("learning rate must be positive")
    state.check(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in sorted(grads):
        p = params[name]
        g = grads[name].data
        if g.shape != p.shape:
            raise ContractViolation(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - step
    return state


class Adam:
    """Small stateful wrapper around :func:`adam_step`."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> None:
        adam_step(params, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
