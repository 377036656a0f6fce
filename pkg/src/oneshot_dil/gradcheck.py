"""Central finite-difference checks for the differentiable ops."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batchnorm import BatchNormState, StatsMode, bn_forward


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_gradients(fn: Callable[[Mapping[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
                    eps: float = 1e-5) -> float:
    """Max relative error between ``backward`` and central differences of the
    scalar ``fn(tensors)`` over every coordinate of every input."""
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in inputs.items()}
    analytic = ad.backward(fn(tensors), tensors)
    worst = 0.0
    for k, t in tensors.items():
        num = numeric_grad(lambda: fn(tensors).item(), t.data, eps)
        worst = max(worst, rel_error(analytic[k], num))
    return worst


def _projected(out: Tensor, r: np.ndarray) -> Tensor:
    # random linear functional keeps every output coordinate in play
    return ad.tsum(ad.mul(out, r))


def _away_from_zero(rng, shape, margin):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2 + x, x)


def _pool_input(rng, shape, margin):
    # distinct values per 2x2 window so the max is unique beyond +-margin
    while True:
        x = rng.normal(size=shape)
        n, c, h, w = shape
        blocks = np.sort(x[:, :, :h // 2 * 2, :w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2)
                         .transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4), axis=1)
        if np.min(blocks[:, 3] - blocks[:, 2]) > 4 * margin:
            return x


def op_case(kind: str, rng: np.random.Generator, eps: float = 1e-5):
    """Return ``(fn, inputs)`` for one random instance of ``kind``."""
    if kind == "linear":
        r = rng.normal(size=(3, 4))
        return (lambda t: _projected(ad.linear(t["x"], t["w"], t["b"]), r),
                {"x": rng.normal(size=(3, 5)), "w": rng.normal(size=(4, 5)), "b": rng.normal(size=4)})
    if kind == "conv2d":
        r = rng.normal(size=(2, 3, 5, 4))
        return (lambda t: _projected(ad.conv2d(t["x"], t["w"], t["b"], padding=1), r),
                {"x": rng.normal(size=(2, 2, 5, 4)), "w": rng.normal(size=(3, 2, 3, 3)),
                 "b": rng.normal(size=3)})
    if kind == "maxpool2x2":
        r = rng.normal(size=(2, 2, 2, 3))
        return (lambda t: _projected(ad.maxpool2x2(t["x"]), r),
                {"x": _pool_input(rng, (2, 2, 5, 6), eps)})
    if kind == "relu":
        r = rng.normal(size=(4, 6))
        return (lambda t: _projected(ad.relu(t["x"]), r), {"x": _away_from_zero(rng, (4, 6), 10 * eps)})
    if kind == "global_avg_pool":
        r = rng.normal(size=(2, 3))
        return (lambda t: _projected(ad.global_avg_pool(t["x"]), r), {"x": rng.normal(size=(2, 3, 4, 3))})
    if kind == "softmax_ce":
        labels = rng.integers(0, 5, size=4)
        return (lambda t: ad.softmax_cross_entropy(t["z"], labels), {"z": rng.normal(size=(4, 5)) * 2})
    if kind in ("batch_norm_updated", "batch_norm_fixed"):
        mode = StatsMode.UPDATED_STATS if kind.endswith("updated") else StatsMode.FIXED_STATS
        shape = (4, 3, 3, 2) if rng.random() < 0.5 else (5, 3)
        r = rng.normal(size=shape)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)

        def fn(t):
            st = BatchNormState(t["gamma"], t["beta"], rm.copy(), rv.copy())
            y, _ = bn_forward(t["x"], st, mode)
            return _projected(y, r)

        return fn, {"x": rng.normal(size=shape) * 1.5 + 0.3, "gamma": rng.normal(size=3),
                    "beta": rng.normal(size=3)}
    raise ValueError(f"unknown op kind {kind!r}")


OP_KINDS = ("linear", "conv2d", "maxpool2x2", "relu", "global_avg_pool", "softmax_ce",
            "batch_norm_updated", "batch_norm_fixed")


def finite_diff_check(kind: str, rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Max relative error of one random instance of op ``kind``."""
    fn, inputs = op_case(kind, rng, eps)
    return check_gradients(fn, inputs, eps)
