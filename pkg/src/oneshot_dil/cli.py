"""Command-line entry points: train-base, one-shot, sweep, trace.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.  Errors are
printed to stderr as lines starting with ``ERROR:``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_model, save_model
from .config import ConfigError, ExperimentConfig, load_config
from .continual import ReplayBuffer
from .data import Dataset, downsample, gen_synthetic, load_idx
from .harness import (Domains, RunReport, prepare, run_cell, run_traces, split_domains, sweep_cells,
                      train_base, evaluate, write_sweep_csv)
from .models import Model, ModelSpec, build
from .rng import substream

log = logging.getLogger("oneshot_dil")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "idx":
        ds = load_idx(cfg.resolve(d.images), cfg.resolve(d.labels))
    else:
        ds = gen_synthetic(d.synthetic, substream(cfg.seed, "synthetic"))
    return downsample(ds, d.downsample)


def make_domains(cfg: ExperimentConfig, ds: Dataset | None = None) -> Domains:
    ds = load_dataset(cfg) if ds is None else ds
    return split_domains(ds, cfg.domains, substream(cfg.seed, "split"))


def model_spec(cfg: ExperimentConfig, domains: Domains) -> ModelSpec:
    m = cfg.model
    return ModelSpec(kind=m.kind, widths=m.widths, num_classes=domains.num_classes,
                     input_shape=tuple(domains.orig_train.images.shape[1:]),
                     bn_momentum=m.bn_momentum, bn_eps=m.bn_eps)


def fit_base(cfg: ExperimentConfig, domains: Domains) -> Model:
    model = build(model_spec(cfg, domains), substream(cfg.seed, "init"))
    return train_base(model, domains.orig_train, cfg.base_train, substream(cfg.seed, "base-train"))


def base_model(cfg: ExperimentConfig, domains: Domains, train_if_missing: bool) -> Model:
    """Load the base checkpoint, or train (and save) it when allowed."""
    path = cfg.checkpoint_path
    if path.exists():
        model, _ = load_model(path)
        want = model_spec(cfg, domains)
        if model.spec != want:
            raise RuntimeError(f"checkpoint {path} was built for {model.spec}, config needs {want}")
        return model
    if not train_if_missing:
        raise FileNotFoundError(f"base checkpoint not found: {path} (run train-base first)")
    model = fit_base(cfg, domains)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, model)
    return model


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train_base(cfg: ExperimentConfig) -> None:
    domains = make_domains(cfg)
    model = fit_base(cfg, domains)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(cfg.checkpoint_path, model)
    metrics = {"orig_val": evaluate(model, domains.orig_val), "orig_test": evaluate(model, domains.orig_test),
               "new_test": evaluate(model, domains.new_test), "num_parameters": model.num_parameters}
    _write_json(out / "base_metrics.json", metrics)
    log.info("base model: %s", metrics)


def cmd_one_shot(cfg: ExperimentConfig) -> RunReport:
    domains = make_domains(cfg)
    base = base_model(cfg, domains, train_if_missing=False)
    prep = prepare(base, domains, cfg.one_shot.buffer_capacity, cfg.n_samples, cfg.seed)
    report = run_cell(prep, cfg.one_shot, cfg.seed)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "one_shot.csv")
    report.to_json(out / "one_shot.json")
    return report


def cmd_sweep(cfg: ExperimentConfig) -> list[RunReport]:
    domains = make_domains(cfg)
    base = base_model(cfg, domains, train_if_missing=True)
    prep = prepare(base, domains, cfg.one_shot.buffer_capacity, cfg.n_samples, cfg.seed)
    reports = [run_cell(prep, cell, cfg.seed)
               for cell in sweep_cells(cfg.one_shot, cfg.sweep.methods, cfg.sweep.stats_modes,
                                       cfg.sweep.batch_regimes)]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", reports)
    _write_json(out / "sweep.json", {"base": {"orig_test": evaluate(base, domains.orig_test),
                                              "new_test": evaluate(base, domains.new_test)},
                                     "cells": [r.summary() for r in reports]})
    return reports


def cmd_trace(cfg: ExperimentConfig) -> dict:
    domains = make_domains(cfg)
    base = base_model(cfg, domains, train_if_missing=True)
    buf = ReplayBuffer.from_data(domains.orig_train.images, domains.orig_train.labels,
                                 cfg.one_shot.buffer_capacity, substream(cfg.seed, "buffer"))
    traces = run_traces(base, domains, buf, cfg.trace, cfg.one_shot.augment, cfg.seed)
    out = cfg.out_dir / "trace"
    out.mkdir(parents=True, exist_ok=True)
    for (regime, trial), tr in sorted(traces.items()):
        tr.to_csv(out / f"{regime}_trial{trial}.csv")
    return traces


COMMANDS = {"train-base": cmd_train_base, "one-shot": cmd_one_shot, "sweep": cmd_sweep, "trace": cmd_trace}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oneshot-dil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="YAML experiment config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"ERROR: {problem}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
