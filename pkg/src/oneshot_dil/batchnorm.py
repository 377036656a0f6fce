"""Batch normalization with explicit statistics handling.

Three modes:

* ``UPDATED_STATS``: batch statistics in forward/backward, running averages
  updated with ``r <- (1 - m) r + m * batch_stat`` (biased batch variance).
* ``FIXED_STATS``: running averages are treated as constants in forward and
  backward and are never written.
* ``INFERENCE``: same arithmetic as ``FIXED_STATS`` without graph recording.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Tensor, _make, no_grad


class StatsMode(str, enum.Enum):
    UPDATED_STATS = "updated"
    FIXED_STATS = "fixed"
    INFERENCE = "inference"

    @classmethod
    def parse(cls, value: "StatsMode | str") -> "StatsMode":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("-", "_")
        for m in cls:
            if v in (m.value, m.name.lower(), m.value + "_stats"):
                return m
        raise ValueError(f"unknown stats mode {value!r}")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ValueError("gamma, beta and running statistics must share channel count")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def init(cls, channels: int, name: str = "bn", momentum: float = 0.1,
             eps: float = 1e-5) -> "BatchNormState":
        return cls(Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma"),
                   Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta"),
                   np.zeros(channels), np.ones(channels), momentum, eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _axes_and_view(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ValueError(f"batch norm expects (N, C) or (N, C, H, W) input, got {x.shape}")


@dataclass
class _Cache:
    mode: StatsMode
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: tuple[int, ...]
    view: tuple[int, ...]


def bn_forward(x: Tensor, state: BatchNormState, mode: StatsMode | str):
    """Normalize ``x`` per channel; returns ``(y, new_state)``.

    In fixed and inference modes the returned state *is* the input state.
    """
    mode = StatsMode.parse(mode)
    axes, view = _axes_and_view(x.data)
    if x.shape[1] != state.channels:
        raise ValueError(f"batch norm {state.gamma.name}: input has {x.shape[1]} "
                         f"channels, state has {state.channels}")
    if mode is StatsMode.UPDATED_STATS:
        if x.shape[0] < 2:
            raise ValueError("UPDATED_STATS needs a batch of at least 2 samples")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        new_state = replace(state,
                            running_mean=(1.0 - m) * state.running_mean + m * mu,
                            running_var=(1.0 - m) * state.running_var + m * var)
    else:
        mu, var = state.running_mean, state.running_var
        new_state = state
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    y = state.gamma.data.reshape(view) * xhat + state.beta.data.reshape(view)
    if mode is StatsMode.INFERENCE:
        with no_grad():
            return _make(y, (x, state.gamma, state.beta), None, "batch_norm"), new_state
    cache = _Cache(mode, xhat, inv_std, state.gamma.data.copy(), axes, view)

    def backward_fn(g):
        return bn_backward(g, cache, mode)

    backward_fn.cache = cache  # exposed for direct bn_backward calls
    return _make(y, (x, state.gamma, state.beta), backward_fn, "batch_norm"), new_state


def bn_backward(upstream: np.ndarray, cache: _Cache, mode: StatsMode | str):
    """Return ``(grad_x, grad_gamma, grad_beta)`` for a cached forward."""
    mode = StatsMode.parse(mode)
    if mode is not cache.mode:
        raise ValueError(f"backward in {mode.name} but forward ran in {cache.mode.name}")
    axes, view = cache.axes, cache.view
    grad_beta = upstream.sum(axis=axes)
    grad_gamma = (upstream * cache.xhat).sum(axis=axes)
    dxhat = upstream * cache.gamma.reshape(view)
    if mode is StatsMode.UPDATED_STATS:
        mean_d = dxhat.mean(axis=axes).reshape(view)
        mean_dx = (dxhat * cache.xhat).mean(axis=axes).reshape(view)
        grad_x = cache.inv_std.reshape(view) * (dxhat - mean_d - cache.xhat * mean_dx)
    else:
        grad_x = dxhat * cache.inv_std.reshape(view)
    return grad_x, grad_gamma, grad_beta


@dataclass
class TraceRecord:
    step: int
    layer: int
    running_mean: float
    running_var: float


@dataclass
class StatsTrace:
    """Channel-averaged running statistics, one record per layer per forward."""

    records: list[TraceRecord] = field(default_factory=list)
    layers: tuple[int, ...] | None = None  # None: every BN layer

    def record(self, step: int, states: Iterable[BatchNormState]) -> "StatsTrace":
        if self.records and step < self.records[-1].step:
            raise ValueError(f"trace step {step} precedes {self.records[-1].step}")
        for i, st in enumerate(states):
            if self.layers is not None and i not in self.layers:
                continue
            self.records.append(TraceRecord(step, i, float(np.mean(st.running_mean)),
                                            float(np.mean(st.running_var))))
        return self

    def series(self, layer: int = 0, stat: str = "running_var") -> np.ndarray:
        return np.array([getattr(r, stat) for r in self.records if r.layer == layer])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "layer", "running_mean", "running_var"])
            for r in self.records:
                w.writerow([r.step, r.layer, repr(r.running_mean), repr(r.running_var)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "StatsTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([TraceRecord(int(r["step"]), int(r["layer"]), float(r["running_mean"]),
                                float(r["running_var"])) for r in rows])


def record_trace(trace: StatsTrace, step: int, layers: Iterable[BatchNormState]) -> StatsTrace:
    return trace.record(step, layers)
