"""Adam over an arbitrary list of trainable float32 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConsistencyError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros(p.size, dtype=np.float32) for p in params]
        state.v = [np.zeros(p.size, dtype=np.float32) for p in params]
        return state

    @property
    def size(self):
        return sum(m.size for m in self.m)


def _flat(a):
    flat = a.reshape(-1)
    if a.size and not np.shares_memory(flat, a):
        raise ConsistencyError("trainable arrays must be contiguous so updates land in place")
    return flat


def adam_step(state, params, grads, names=None):
    """Bias-corrected Adam with decoupled weight decay, applied in place.

    Raises NumericError on a non-finite gradient before touching any state.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConsistencyError("params, grads and optimizer state are not aligned")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.size != g.size:
            raise ConsistencyError(f"gradient {i} has {g.size} values for {p.size} parameters")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for {label} at step {state.step + 1}")
    state.step += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(_flat(p), np.asarray(g, dtype=np.float32).reshape(-1), m, v,
                            lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                            weight_decay=state.weight_decay, step=state.step)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm and total > max_norm:
        factor = np.float32(max_norm / (total + 1e-6))
        for g in grads:
            g *= factor
    return total
