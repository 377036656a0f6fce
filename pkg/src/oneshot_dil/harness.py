"""End-to-end protocol: domain construction, base training, the one-shot
incremental loop, learning-rate selection, evaluation and aggregation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig
from .batchnorm import StatsMode, StatsTrace
from .continual import (FisherDiag, MiniBatch, ReplayBuffer, compose_minibatch, ewc_fisher,
                        ewc_penalty, gem_project, gem_reference_gradient)
from .data import Dataset
from .models import Model, loss_ce, predict
from .optim import AdamState, adam_step, cosine_lr, sgd_step
from .rng import substream

log = logging.getLogger(__name__)

METHODS = ("CE", "CE+EWC", "CE+GEM")
DEFAULT_LR_GRID = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


# ---------------------------------------------------------------- domains

@dataclass
class DomainSpec:
    c1: int                 # raw class that becomes the new domain
    c2: int                 # raw class that absorbs it (label y0)
    orig_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    new_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    max_train: int | None = 2000
    max_val: int | None = 500

    def __post_init__(self):
        self.orig_fractions = tuple(float(f) for f in self.orig_fractions)
        self.new_fractions = tuple(float(f) for f in self.new_fractions)
        if self.c1 == self.c2:
            raise ValueError("c1 and c2 must differ")
        for fr in (self.orig_fractions, self.new_fractions):
            if len(fr) != 3 or min(fr) < 0 or sum(fr) > 1 + 1e-12:
                raise ValueError(f"split fractions {fr} must be 3 non-negative values summing to <= 1")


@dataclass
class Domains:
    orig_train: Dataset
    orig_val: Dataset
    orig_test: Dataset
    new_train: Dataset
    new_val: Dataset
    new_test: Dataset
    y0: int
    num_classes: int
    class_map: dict[int, int]  # raw class -> merged 0-based label


def _partition(n: int, fractions, rng, caps=(None, None)):
    perm = rng.permutation(n)
    n_tr, n_va = int(fractions[0] * n), int(fractions[1] * n)
    n_te = int(round(fractions[2] * n)) if sum(fractions) < 1 - 1e-12 else n - n_tr - n_va
    tr, va, te = perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:n_tr + n_va + n_te]
    if caps[0] is not None:
        tr = tr[:caps[0]]
    if caps[1] is not None:
        va = va[:caps[1]]
    return np.sort(tr), np.sort(va), np.sort(te)


def split_domains(dataset: Dataset, spec: DomainSpec, rng: np.random.Generator) -> Domains:
    """Merge class ``c1`` into ``c2``'s label and split both domains three ways."""
    present = set(np.unique(dataset.labels).tolist())
    for c in (spec.c1, spec.c2):
        if c not in present:
            raise ValueError(f"class {c} absent from dataset (classes: {sorted(present)})")
    orig_classes = sorted(present - {spec.c1})
    class_map = {c: i for i, c in enumerate(orig_classes)}
    y0 = class_map[spec.c2]
    class_map[spec.c1] = y0
    merged = np.array([class_map[c] for c in dataset.labels.tolist()], dtype=np.int64)
    relabeled = Dataset(dataset.images, merged)

    orig_idx = np.flatnonzero(dataset.labels != spec.c1)
    new_idx = np.flatnonzero(dataset.labels == spec.c1)
    o_tr, o_va, o_te = _partition(len(orig_idx), spec.orig_fractions, rng, (spec.max_train, spec.max_val))
    n_tr, n_va, n_te = _partition(len(new_idx), spec.new_fractions, rng)
    return Domains(relabeled.subset(orig_idx[o_tr]), relabeled.subset(orig_idx[o_va]),
                   relabeled.subset(orig_idx[o_te]), relabeled.subset(new_idx[n_tr]),
                   relabeled.subset(new_idx[n_va]), relabeled.subset(new_idx[n_te]),
                   y0, len(orig_classes), class_map)


# ---------------------------------------------------------------- base training

@dataclass
class BaseTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_max: float = 0.1
    lr_min: float = 0.0


def train_base(model: Model, train: Dataset, cfg: BaseTrainConfig, rng: np.random.Generator) -> Model:
    """Plain SGD with a per-iteration cosine schedule, batch statistics updated."""
    model.set_mode(StatsMode.UPDATED_STATS)
    n = len(train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = loss_ce(model, train.images[idx], train.labels[idx])
            if not np.isfinite(loss.item()):
                raise ad.NonFiniteError(f"base training diverged at epoch {epoch}, step {step}: loss={loss.item()}")
            sgd_step(model.params, ad.backward(loss, model.params),
                     cosine_lr(step, total, cfg.lr_max, cfg.lr_min))
            step += 1
        log.debug("epoch %d loss %.4f", epoch, loss.item())
    return model


def evaluate(model: Model, split: Dataset) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    labels, _ = predict(model, split.images, StatsMode.INFERENCE)
    return float(np.mean(labels == split.labels))


def pick_new_samples(model: Model, new_train: Dataset, n: int, rng: np.random.Generator) -> list[int]:
    """Indices into ``new_train`` of ``n`` samples the model misclassifies."""
    labels, _ = predict(model, new_train.images, StatsMode.INFERENCE)
    pool = np.flatnonzero(labels != new_train.labels)
    if len(pool) < n:
        log.warning("only %d misclassified new-domain samples available (wanted %d)", len(pool), n)
        n = len(pool)
    return [int(i) for i in rng.choice(pool, size=n, replace=False)]


def prob_of(model: Model, x0: np.ndarray, y0: int) -> float:
    _, probs = predict(model, x0[None], StatsMode.INFERENCE)
    return float(probs[0, y0])


def judge(model: Model, x0: np.ndarray, y0: int, delta: float) -> bool:
    """True iff the softmax probability of ``y0`` on ``x0`` exceeds ``delta``."""
    return prob_of(model, x0, y0) > delta


# ---------------------------------------------------------------- one-shot loop

@dataclass
class OneShotConfig:
    method: str = "CE"
    stats_mode: StatsMode = StatsMode.FIXED_STATS
    batch_sizes: tuple[int, int] = (32, 32)
    delta: float = 0.99
    max_iters: int = 100
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    buffer_capacity: int = 1000
    ewc_lambda: float = 100.0
    gem_batch_size: int | None = None   # defaults to |B|
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.stats_mode = StatsMode.parse(self.stats_mode)
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        self.lr_grid = tuple(float(v) for v in self.lr_grid)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        errors = []
        if self.method not in METHODS:
            errors.append(f"method must be one of {METHODS}")
        if self.stats_mode is StatsMode.INFERENCE:
            errors.append("stats_mode must be updated or fixed")
        if not 0 <= self.delta <= 1:
            errors.append("delta must lie in [0, 1]")
        if self.max_iters < 1:
            errors.append("max_iters must be >= 1")
        if not self.lr_grid:
            errors.append("lr_grid must be non-empty")
        if len(self.batch_sizes) != 2 or self.batch_sizes[0] < 0 or self.batch_sizes[1] < 1:
            errors.append("batch_sizes must be (|B| >= 0, |C| >= 1)")
        if self.ewc_lambda < 0:
            errors.append("ewc_lambda must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def copies(self) -> int:
        return self.batch_sizes[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stats_mode"] = self.stats_mode.value
        d["batch_sizes"] = list(self.batch_sizes)
        d["lr_grid"] = list(self.lr_grid)
        d["augment"] = self.augment.to_dict()
        return d


@dataclass
class DilRun:
    """Outcome of one run of the incremental loop at one learning rate."""

    lr: float
    iters: int
    reason: str                 # "converged" | "iteration_cap"
    final_prob: float
    gem_min_dot: float | None = None       # min <g~, g_ref> over steps
    gem_equal_when_ok: bool | None = None  # g~ == g whenever <g, g_ref> >= 0

    @property
    def terminated(self) -> bool:
        return self.reason == "converged"


def dil_step(model: Model, batch: MiniBatch, cfg: OneShotConfig, opt: AdamState, lr: float,
             buf: ReplayBuffer, rng: np.random.Generator, fisher: FisherDiag | None = None):
    """One parameter update on ``batch``; returns ``(g, g_ref, g_applied)`` for GEM else None."""
    gem = None
    g_ref = None
    if cfg.method == "CE+GEM":
        g_ref = gem_reference_gradient(model, buf, cfg.gem_batch_size or cfg.batch_sizes[0] or 1, rng)
    loss = loss_ce(model, batch.x, batch.y)
    if cfg.method == "CE+EWC":
        if fisher is None:
            raise ValueError("CE+EWC needs a Fisher diagonal")
        loss = ad.add(loss, ewc_penalty(model.params, fisher, cfg.ewc_lambda))
    grads = ad.backward(loss, model.params)
    if g_ref is not None:
        g = ad.flatten_grads(grads, model.params)
        g_new = gem_project(g, g_ref)
        grads = ad.unflatten_grads(g_new, model.params)
        gem = (g, g_ref, g_new)
    adam_step(model.params, grads, opt, lr)
    return gem


def one_shot_dil(base: Model, buf: ReplayBuffer, x0: np.ndarray, y0: int, cfg: OneShotConfig,
                 lr: float, rng: np.random.Generator, fisher: FisherDiag | None = None,
                 trace: StatsTrace | None = None) -> tuple[Model, DilRun]:
    """Update a copy of ``base`` until ``judge`` fires or ``max_iters`` steps ran."""
    model = base.copy()
    model.set_mode(cfg.stats_mode)
    model.trace = trace
    opt = AdamState.for_params(model.params)
    gem_min, gem_ok = (math.inf, True) if cfg.method == "CE+GEM" else (None, None)
    t = 0
    while True:
        p = prob_of(model, x0, y0)
        if p > cfg.delta:
            reason = "converged"
            break
        if t >= cfg.max_iters:
            reason = "iteration_cap"
            break
        batch = compose_minibatch(buf, x0, y0, cfg.batch_sizes, cfg.augment, rng)
        gem = dil_step(model, batch, cfg, opt, lr, buf, rng, fisher)
        if gem is not None:
            g, g_ref, g_new = gem
            gem_min = min(gem_min, float(g_new @ g_ref))
            if float(g @ g_ref) >= 0 and not np.array_equal(g, g_new):
                gem_ok = False
        t += 1
    model.trace = None
    if gem_min is not None and t == 0:
        gem_min = None
    return model, DilRun(lr, t, reason, p, gem_min, gem_ok)


@dataclass
class LrSearchResult:
    best: DilRun
    model: Model
    val_acc: float | None
    runs: list[DilRun]
    val_accs: list[float | None]

    @property
    def terminated(self) -> bool:
        return self.best.terminated


def lr_search(base: Model, buf: ReplayBuffer, x0: np.ndarray, y0: int, cfg: OneShotConfig,
              val: Dataset, seed: int, trial: int = 0, fisher: FisherDiag | None = None) -> LrSearchResult:
    """Run every grid point from the base model; keep converged runs, pick the
    best original-domain validation accuracy (ties -> smaller lr).  With no
    converged run, return the one with the highest final probability."""
    runs, accs = [], []
    best_i, best_key, best_model = None, None, None
    for i, lr in enumerate(cfg.lr_grid):
        # stream keyed by (trial, lr) only: cells share augmentation draws
        rng = substream(seed, "dil", trial, repr(lr))
        model, run = one_shot_dil(base, buf, x0, y0, cfg, lr, rng, fisher)
        acc = evaluate(model, val) if run.terminated else None
        runs.append(run)
        accs.append(acc)
        key = (1, acc, -lr) if run.terminated else (0, run.final_prob, -lr)
        if best_key is None or key > best_key:
            best_i, best_key, best_model = i, key, model
    return LrSearchResult(runs[best_i], best_model, accs[best_i], runs, accs)


# ---------------------------------------------------------------- reporting

@dataclass
class TrialResult:
    trial: int
    method: str
    stats_mode: str
    batch_sizes: tuple[int, int]
    lr: float
    iters: int
    terminated: bool
    reason: str
    acc_new: float
    acc_orig: float
    val_acc: float | None = None
    final_prob: float = float("nan")
    sample_index: int = -1
    gem_min_dot: float | None = None
    gem_equal_when_ok: bool | None = None


@dataclass
class RunReport:
    trials: list[TrialResult]
    median: dict[str, float]
    std: dict[str, float]
    trace: StatsTrace | None = None

    RUN_HEADER = ("trial", "method", "stats_mode", "lr", "iters", "terminated", "acc_new", "acc_orig")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.RUN_HEADER)
            for t in self.trials:
                w.writerow(_trial_row(t))

    def summary(self) -> dict:
        first = self.trials[0]
        return {"method": first.method, "stats_mode": first.stats_mode,
                "batch_sizes": list(first.batch_sizes), "n_trials": len(self.trials),
                "n_terminated": sum(t.terminated for t in self.trials),
                "median": self.median, "std": self.std}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _trial_row(t: TrialResult) -> list:
    return [t.trial, t.method, t.stats_mode, _fmt(t.lr), t.iters, int(t.terminated),
            _fmt(t.acc_new), _fmt(t.acc_orig)]


def aggregate(trials: Sequence[TrialResult]) -> RunReport:
    """Median and population standard deviation of each accuracy metric."""
    if not trials:
        raise ValueError("aggregate needs at least one trial")
    median, std = {}, {}
    for key in ("acc_new", "acc_orig"):
        vals = np.array([getattr(t, key) for t in trials], dtype=np.float64)
        median[key] = float(np.median(vals))
        std[key] = float(np.std(vals))
    return RunReport(list(trials), median, std)


# ---------------------------------------------------------------- experiments

@dataclass
class Prepared:
    """Everything the incremental phase needs, derived from the base checkpoint."""

    base: Model
    domains: Domains
    buffer: ReplayBuffer
    samples: list[int]          # indices into domains.new_train
    fisher: FisherDiag | None = None


def prepare(base: Model, domains: Domains, capacity: int, n_samples: int, seed: int,
            need_fisher: bool = False) -> Prepared:
    buf = ReplayBuffer.from_data(domains.orig_train.images, domains.orig_train.labels, capacity,
                                 substream(seed, "buffer"))
    samples = pick_new_samples(base, domains.new_train, n_samples, substream(seed, "new-samples"))
    fisher = ewc_fisher(base, buf) if need_fisher else None
    return Prepared(base, domains, buf, samples, fisher)


def run_cell(prep: Prepared, cfg: OneShotConfig, seed: int) -> RunReport:
    """All sampled ``(x0, y0)`` trials for one (method, mode, batch sizes) cell."""
    if cfg.method == "CE+EWC" and prep.fisher is None:
        prep.fisher = ewc_fisher(prep.base, prep.buffer)
    d = prep.domains
    val = d.orig_val
    results = []
    for trial, idx in enumerate(prep.samples):
        x0, y0 = d.new_train.images[idx], int(d.new_train.labels[idx])
        res = lr_search(prep.base, prep.buffer, x0, y0, cfg, val, seed, trial, prep.fisher)
        b = res.best
        results.append(TrialResult(trial, cfg.method, cfg.stats_mode.value, cfg.batch_sizes, b.lr,
                                   b.iters, b.terminated, b.reason, evaluate(res.model, d.new_test),
                                   evaluate(res.model, d.orig_test), res.val_acc, b.final_prob, idx,
                                   b.gem_min_dot, b.gem_equal_when_ok))
        log.info("%s/%s/%s trial %d: lr=%g iters=%d %s new=%.3f orig=%.3f", cfg.method,
                 cfg.stats_mode.value, cfg.batch_sizes, trial, b.lr, b.iters, b.reason,
                 results[-1].acc_new, results[-1].acc_orig)
    return aggregate(results)


BATCH_REGIMES = ((32, 32), (63, 1))


def sweep_cells(base_cfg: OneShotConfig, methods=METHODS,
                modes=(StatsMode.UPDATED_STATS, StatsMode.FIXED_STATS), regimes=BATCH_REGIMES):
    for method in methods:
        for regime in regimes:
            for mode in modes:
                d = base_cfg.to_dict()
                d.update(method=method, stats_mode=mode, batch_sizes=list(regime))
                yield OneShotConfig(**d)


def write_sweep_csv(path: str | Path, reports: Sequence[RunReport]) -> None:
    header = ("trial", "method", "stats_mode", "batch_sizes", "lr", "iters", "terminated",
              "acc_new", "acc_orig", "acc_new_std", "acc_orig_std")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rep in reports:
            f = rep.trials[0]
            bs = "x".join(map(str, f.batch_sizes))
            w.writerow(["median", f.method, f.stats_mode, bs, "", "", sum(t.terminated for t in rep.trials),
                        _fmt(rep.median["acc_new"]), _fmt(rep.median["acc_orig"]),
                        _fmt(rep.std["acc_new"]), _fmt(rep.std["acc_orig"])])
        for rep in reports:
            for t in rep.trials:
                row = _trial_row(t)
                w.writerow(row[:3] + ["x".join(map(str, t.batch_sizes))] + row[3:] + ["", ""])


# ---------------------------------------------------------------- statistics traces

@dataclass
class TraceConfig:
    trials: int = 5
    steps: int = 100
    lr: float = 1e-5
    batch_sizes: tuple[int, int] = (32, 32)
    many_shot_size: int = 1000

    def __post_init__(self):
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        if self.trials < 1 or self.steps < 1:
            raise ValueError("trials and steps must be >= 1")


def trace_run(base: Model, buf: ReplayBuffer, new_x: np.ndarray, y0: int, regime: str,
              tcfg: TraceConfig, augment: AugmentConfig, rng: np.random.Generator) -> StatsTrace:
    """Fixed-length CE run with updated statistics, recording every forward.

    ``regime="one_shot"``: ``new_x`` is a single image, C holds augmented copies.
    ``regime="many_shot"``: ``new_x`` holds distinct new-domain images, C is
    drawn from them without augmentation.
    """
    cfg = OneShotConfig(method="CE", stats_mode=StatsMode.UPDATED_STATS, batch_sizes=tcfg.batch_sizes,
                        augment=augment, lr_grid=(tcfg.lr,))
    model = base.copy()
    model.set_mode(StatsMode.UPDATED_STATS)
    trace = StatsTrace().record(0, model.bn)
    model.trace = trace
    opt = AdamState.for_params(model.params)
    n_b, n_c = tcfg.batch_sizes
    for _ in range(tcfg.steps):
        if regime == "one_shot":
            batch = compose_minibatch(buf, new_x, y0, tcfg.batch_sizes, augment, rng)
        elif regime == "many_shot":
            xb, yb = buf.sample(n_b, rng)
            xc = new_x[rng.choice(len(new_x), size=n_c, replace=False)]
            perm = rng.permutation(n_b + n_c)
            x = np.concatenate([xb, xc])[perm]
            y = np.concatenate([yb, np.full(n_c, y0, dtype=yb.dtype)])[perm]
            batch = MiniBatch(x, y, np.r_[np.zeros(n_b, bool), np.ones(n_c, bool)][perm], n_b, n_c)
        else:
            raise ValueError(f"unknown regime {regime!r}")
        dil_step(model, batch, cfg, opt, tcfg.lr, buf, rng)
    model.trace = None
    return trace


def run_traces(base: Model, domains: Domains, buf: ReplayBuffer, tcfg: TraceConfig,
               augment: AugmentConfig, seed: int) -> dict[tuple[str, int], StatsTrace]:
    """``tcfg.trials`` traces in each regime, each with a different new-domain draw."""
    new = domains.new_train
    out = {}
    picks = substream(seed, "trace-one-shot-samples").choice(len(new), size=min(tcfg.trials, len(new)),
                                                            replace=False)
    for trial in range(tcfg.trials):
        x0 = new.images[picks[trial % len(picks)]]
        out[("one_shot", trial)] = trace_run(base, buf, x0, domains.y0, "one_shot", tcfg, augment,
                                             substream(seed, "trace", "one_shot", trial))
        sub = substream(seed, "trace-many-shot-samples", trial)
        idx = sub.choice(len(new), size=min(tcfg.many_shot_size, len(new)), replace=False)
        out[("many_shot", trial)] = trace_run(base, buf, new.images[idx], domains.y0, "many_shot", tcfg,
                                              augment, substream(seed, "trace", "many_shot", trial))
    return out


def trace_outcome(traces: dict[tuple[str, int], StatsTrace], layer: int = 0) -> dict:
    """Per regime: net running-variance change of each trial and the across-trial
    std of the final running mean, on BN layer ``layer``."""
    out = {}
    for regime in sorted({r for r, _ in traces}):
        trials = sorted(t for r, t in traces if r == regime)
        var = [traces[(regime, t)].series(layer, "running_var") for t in trials]
        mean = [traces[(regime, t)].series(layer, "running_mean") for t in trials]
        out[regime] = {"var_change": [float(v[-1] - v[0]) for v in var],
                       "final_mean_std": float(np.std([m[-1] for m in mean]))}
    return out
