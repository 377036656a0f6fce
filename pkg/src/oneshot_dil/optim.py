"""SGD with cosine annealing (base training) and Adam (one-shot phase)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import NonFiniteError, Tensor


def _check_grads(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        raise ValueError(f"gradient keys differ from parameters: {sorted(set(params) ^ set(grads))}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}; step rejected")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In-place ``theta <- theta - lr * g``."""
    _check_grads(params, grads)
    for k, t in params.items():
        t.assign(t.data - lr * grads[k])


def cosine_lr(t: float, total: float, lr_max: float = 0.1, lr_min: float = 0.0) -> float:
    if total <= 0 or t >= total:
        return lr_min
    t = max(t, 0.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update; parameters change in place, state is advanced."""
    _check_grads(params, grads)
    if not state.m:
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v = {}, {}
    for k, g in grads.items():
        new_m[k] = b1 * state.m[k] + (1.0 - b1) * g
        new_v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        if not (np.all(np.isfinite(new_m[k])) and np.all(np.isfinite(new_v[k]))):
            raise NonFiniteError(f"non-finite Adam moments for {k} at step {t}")
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        p.assign(p.data - lr * (new_m[k] / c1) / (np.sqrt(new_v[k] / c2) + state.eps))
    state.m, state.v, state.t = new_m, new_v, t
    return state
