"""Replay buffer, mini-batch composition, EWC penalty and GEM projection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, ImageSample, replicate
from .autodiff import Tensor
from .batchnorm import StatsMode
from .models import Model, loss_ce

log = logging.getLogger(__name__)


@dataclass
class ReplayBuffer:
    """Stored subset of original-domain examples."""

    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) 0-based
    capacity: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.images) > self.capacity:
            raise ValueError(f"{len(self.images)} samples exceed capacity {self.capacity}")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_data(cls, images, labels, capacity: int, rng: np.random.Generator) -> "ReplayBuffer":
        n = min(capacity, len(labels))
        idx = np.sort(rng.choice(len(labels), size=n, replace=False))
        return cls(np.asarray(images)[idx], np.asarray(labels)[idx], capacity)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("replay buffer is empty")
        if n > len(self):
            raise ValueError(f"cannot draw {n} samples without replacement from {len(self)}")
        idx = rng.choice(len(self), size=n, replace=False)
        return self.images[idx], self.labels[idx]


@dataclass
class MiniBatch:
    x: np.ndarray
    y: np.ndarray
    is_new: np.ndarray  # True where the row came from the augmented copies
    n_orig: int
    n_new: int


def compose_minibatch(buf: ReplayBuffer, x0: np.ndarray, y0: int, sizes: tuple[int, int],
                      cfg: AugmentConfig, rng: np.random.Generator) -> MiniBatch:
    """``B`` drawn from the buffer, ``C`` = augmented copies of ``x0``, shuffled together."""
    n_b, n_c = sizes
    if n_c < 1:
        raise ValueError("|C| must be >= 1")
    if n_b < 0:
        raise ValueError("|B| must be >= 0")
    if len(buf) == 0:
        raise ValueError("replay buffer is empty")
    xb, yb = buf.sample(n_b, rng)
    copies = replicate(ImageSample(x0, y0), n_c, cfg, rng)
    xc = np.stack([s.image for s in copies])
    x = np.concatenate([xb, xc])
    y = np.concatenate([yb, np.full(n_c, y0, dtype=yb.dtype)])
    is_new = np.r_[np.zeros(n_b, bool), np.ones(n_c, bool)]
    perm = rng.permutation(len(y))
    return MiniBatch(x[perm], y[perm], is_new[perm], n_b, n_c)


# ---------------------------------------------------------------- EWC

@dataclass
class FisherDiag:
    fisher: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]


def ewc_fisher(model: Model, buf: ReplayBuffer, mode: StatsMode | str = StatsMode.FIXED_STATS) -> FisherDiag:
    """Diagonal empirical Fisher: mean over the buffer of squared per-sample
    log-likelihood gradients (true labels).  Anchors at the current parameters."""
    if len(buf) == 0:
        raise ValueError("replay buffer is empty")
    mode = StatsMode.parse(mode)
    if mode is StatsMode.UPDATED_STATS:
        raise ValueError("Fisher passes must not update running statistics")
    fisher = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    for i in range(len(buf)):
        loss = loss_ce(model, buf.images[i:i + 1], buf.labels[i:i + 1], StatsMode.FIXED_STATS)
        for k, g in ad.backward(loss, model.params).items():
            fisher[k] += g * g
    n = float(len(buf))
    return FisherDiag({k: f / n for k, f in fisher.items()},
                      {k: t.data.copy() for k, t in model.params.items()})


def ewc_penalty(params: dict[str, Tensor], fisher: FisherDiag, lam: float) -> Tensor:
    """``lam / 2 * sum_i F_i (theta_i - theta*_i)^2`` as a graph node."""
    if lam < 0:
        raise ValueError(f"EWC lambda must be >= 0, got {lam}")
    total = None
    for k, p in params.items():
        term = ad.tsum(ad.mul(ad.square(ad.sub(p, fisher.anchor[k])), fisher.fisher[k]))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 0.5 * lam)


def ewc_penalty_grad(params: dict[str, Tensor], fisher: FisherDiag, lam: float) -> dict[str, np.ndarray]:
    return {k: lam * fisher.fisher[k] * (p.data - fisher.anchor[k]) for k, p in params.items()}


# ---------------------------------------------------------------- GEM

def gem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g`` onto the half-space ``<g, g_ref> >= 0`` (single constraint)."""
    g, g_ref = np.asarray(g, dtype=np.float64), np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ValueError(f"gradient shapes differ: {g.shape} vs {g_ref.shape}")
    dot = float(g @ g_ref)
    if dot >= 0:
        return g
    ref_sq = float(g_ref @ g_ref)
    if ref_sq == 0.0:
        log.warning("GEM: zero reference gradient with violated constraint; gradient left unchanged")
        return g
    out = g - (dot / ref_sq) * g_ref
    # cancellation can leave a tiny negative residual; one corrective pass clears it
    resid = float(out @ g_ref)
    if resid < 0:
        out = out - (resid / ref_sq) * g_ref
    return out


def gem_reference_gradient(model: Model, buf: ReplayBuffer, batch_size: int,
                           rng: np.random.Generator, mode: StatsMode | str | None = None) -> np.ndarray:
    """Flattened CE gradient on a fresh buffer mini-batch (parameter order of ``model.params``)."""
    if len(buf) == 0:
        raise ValueError("replay buffer is empty")
    x, y = buf.sample(min(batch_size, len(buf)), rng)
    grads = ad.backward(loss_ce(model, x, y, mode), model.params)
    return ad.flatten_grads(grads, model.params)
