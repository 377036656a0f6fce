"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every op returns a :class:`Tensor` that remembers its inputs and a closure
mapping the upstream gradient to gradients for each input.  :func:`backward`
walks the graph in reverse topological order and returns gradients for the
requested leaves only.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class GraphError(RuntimeError):
    """Raised on misuse of the compute graph (stale or missing forward)."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf crosses a graph boundary."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents (inference path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")


class Tensor:
    """Dense float64 array with an optional node in the compute graph.

    Leaves created by the user carry ``requires_grad``; intermediate nodes
    keep ``parents`` and a ``backward_fn``.  ``version`` is bumped whenever a
    leaf's data is replaced so graphs built from old values can be detected.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op",
                 "name", "version", "_parent_versions")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name
        self.version = 0
        self._parent_versions: tuple[int, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def assign(self, value: np.ndarray) -> None:
        """Replace the leaf value; graphs that captured the old value go stale."""
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.data.shape:
            raise ValueError(f"{self.name}: shape {value.shape} != {self.data.shape}")
        self.data = value
        self.version += 1

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


ParameterSet = dict  # name -> Tensor; kept as a plain dict on purpose


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out._parent_versions = tuple(p.version for p in parents)
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- layers

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear{'' if w.name is None else ' ' + w.name}: "
                         f"input width {x.shape[-1]} != {w.shape[1]}")

    def backward_fn(g):
        gx = g @ w.data if x.requires_grad else None
        return gx, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ w.data.T + b.data, (x, w, b), backward_fn, "linear")


def _im2col(xt: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    """Padded (C, N, H, W) input -> columns (C*KH*KW, N*OH*OW)."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + oh, j:j + ow]
    return cols.reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation with zero padding; ``w`` is (out, in, kh, kw)."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv2d{'' if w.name is None else ' ' + w.name}: "
                         f"input channels {c} != {ci}")
    p = padding
    xt = np.pad(x.data.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    cols = _im2col(xt, kh, kw, oh, ow)
    wmat = w.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, n, oh, ow) + b.data[:, None, None, None]

    def backward_fn(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        gb = gmat.sum(axis=1)
        if not x.requires_grad:
            return None, gw, gb
        gcols = (wmat.T @ gmat).reshape(ci, kh, kw, n, oh, ow)
        gxt = np.zeros_like(xt)
        for i in range(kh):
            for j in range(kw):
                gxt[:, :, i:i + oh, j:j + ow] += gcols[:, i, j]
        return gxt[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3), gw, gb

    # (N, C, H, W) view over channel-major storage
    return _make(out.transpose(1, 0, 2, 3), (x, w, b), backward_fn, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2; trailing odd rows/cols are dropped.  Ties send
    the gradient to the first maximal entry in row-major window order."""
    n, c, h, wd = x.shape
    oh, ow = h // 2, wd // 2
    if oh == 0 or ow == 0:
        raise ValueError(f"maxpool2x2: spatial size {h}x{wd} too small")
    d = x.data
    parts = [d[:, :, i:2 * oh:2, j:2 * ow:2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))

    def backward_fn(g):
        gx = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (parts[k] == out) & ~taken
            taken |= hit
            gx[:, :, i:2 * oh:2, j:2 * ow:2] = g * hit
        return (gx,)

    return _make(out, (x,), backward_fn, "maxpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, wd = x.shape
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy(),),
                 "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are 0-based class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward_fn(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), backward_fn, "softmax_ce")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None):
    """Gradients of scalar ``loss`` w.r.t. the leaves in ``wrt``.

    Returns a dict with the same keys as ``wrt``; leaves the loss does not
    depend on get zeros.  With ``wrt=None`` returns ``{id(leaf): grad}`` for
    every leaf reached.
    """
    if loss.is_leaf:
        raise GraphError("backward called on a tensor with no recorded forward graph")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if node.is_leaf:
            leaves[id(node)] = node
            continue
        if g is None:
            continue
        for p, v in zip(node.parents, node._parent_versions):
            if p.is_leaf and p.version != v:
                raise GraphError(f"stale graph: {p.name or 'leaf'} changed after forward")
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    if wrt is None:
        return {k: grads[k] for k in leaves if k in grads}
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()}


# ---------------------------------------------------------------- helpers

def flatten_grads(grads: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> np.ndarray:
    names = list(grads) if names is None else list(names)
    return np.concatenate([np.ravel(grads[k]) for k in names])


def unflatten_grads(flat: np.ndarray, like: Mapping[str, np.ndarray | Tensor]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k, v in like.items():
        shape = v.shape
        size = int(np.prod(shape))
        out[k] = flat[i:i + size].reshape(shape)
        i += size
    if i != flat.size:
        raise ValueError(f"flat gradient has {flat.size} entries, expected {i}")
    return out
