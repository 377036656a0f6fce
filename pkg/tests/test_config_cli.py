import copy

import numpy as np
import pytest
import yaml

from oneshot_dil.cli import main
from oneshot_dil.config import OUTPUT_ENV, ConfigError, ExperimentConfig, dumps, from_dict, load_config, loads
from oneshot_dil.data import write_idx

TINY = {
    "seed": 3,
    "output_dir": "out",
    "n_samples": 2,
    "dataset": {"kind": "synthetic",
                "synthetic": {"num_classes": 4, "image_side": 8, "samples_per_class": 60, "latent_dim": 4,
                              "separation": 3.0, "class_std": 0.3, "noise_std": 0.05}},
    "domains": {"c1": 3, "c2": 1},
    "model": {"kind": "mlp", "widths": [16]},
    "base_train": {"epochs": 5, "batch_size": 32},
    "one_shot": {"method": "CE", "stats_mode": "fixed", "batch_sizes": [16, 16], "lr_grid": [1e-2, 1e-3],
                 "max_iters": 5, "buffer_capacity": 100},
    "trace": {"trials": 5, "steps": 3, "batch_sizes": [8, 8], "many_shot_size": 20},
}


def write_cfg(tmp_path, data=TINY, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_round_trip_defaults_and_custom():
    for cfg in (ExperimentConfig(), from_dict(copy.deepcopy(TINY))):
        assert loads(dumps(cfg)) == cfg
        assert dumps(loads(dumps(cfg))) == dumps(cfg)


def test_unknown_keys_listed():
    data = copy.deepcopy(TINY)
    data["colour"] = 1
    data["one_shot"]["lr"] = 0.1
    data["dataset"]["synthetic"]["sides"] = 3
    with pytest.raises(ConfigError) as exc:
        from_dict(data)
    assert sorted(exc.value.problems) == ["colour: unknown key", "dataset.synthetic.sides: unknown key",
                                          "one_shot.lr: unknown key"]


def test_invalid_values_reported_with_path():
    data = copy.deepcopy(TINY)
    data["one_shot"]["method"] = "SGD"
    with pytest.raises(ConfigError, match="one_shot: method must be one of"):
        from_dict(data)


def test_missing_idx_files(tmp_path):
    data = {"dataset": {"kind": "idx", "images": "nope-images", "labels": "nope-labels"}}
    with pytest.raises(ConfigError) as exc:
        load_config(write_cfg(tmp_path, data))
    assert len(exc.value.problems) == 2 and "dataset.images: file not found" in exc.value.problems[0]


def test_relative_paths_resolve_against_config_dir(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    assert cfg.out_dir == tmp_path / "out" and cfg.checkpoint_path == tmp_path / "out" / "base.ckpt"


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert load_config(write_cfg(tmp_path)).out_dir == tmp_path / "elsewhere"


def test_exit_code_config_error(tmp_path, capsys):
    data = copy.deepcopy(TINY)
    data["bogus"] = True
    assert main(["train-base", str(write_cfg(tmp_path, data))]) == 1
    assert capsys.readouterr().err.strip() == "ERROR: bogus: unknown key"


def test_exit_code_missing_config(tmp_path, capsys):
    assert main(["sweep", str(tmp_path / "absent.yaml")]) == 1
    assert capsys.readouterr().err.startswith("ERROR: config file not found")


def test_one_shot_without_checkpoint_fails(tmp_path, capsys):
    assert main(["one-shot", str(write_cfg(tmp_path))]) == 2
    assert "ERROR: FileNotFoundError: base checkpoint not found" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path, capsys):
    data = copy.deepcopy(TINY)
    data["domains"] = {"c1": 7, "c2": 0}
    assert main(["train-base", str(write_cfg(tmp_path, data))]) == 2
    assert "ERROR: ValueError: class 7 absent" in capsys.readouterr().err


def test_train_then_one_shot_outputs(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["train-base", str(cfg)]) == 0
    assert main(["one-shot", str(cfg)]) == 0
    rows = (tmp_path / "out" / "one_shot.csv").read_text().splitlines()
    assert rows[0] == "trial,method,stats_mode,lr,iters,terminated,acc_new,acc_orig"
    assert len(rows) == 1 + TINY["n_samples"]
    assert (tmp_path / "out" / "one_shot.json").exists() and (tmp_path / "out" / "base_metrics.json").exists()


def test_sweep_table_shape(tmp_path):
    assert main(["sweep", str(write_cfg(tmp_path))]) == 0
    rows = (tmp_path / "out" / "sweep.csv").read_text().splitlines()[1:]
    medians = [r for r in rows if r.startswith("median,")]
    assert len(medians) == 12
    assert len(rows) - len(medians) == 12 * TINY["n_samples"]


def test_trace_writes_ten_files(tmp_path):
    assert main(["trace", str(write_cfg(tmp_path))]) == 0
    files = sorted(p.name for p in (tmp_path / "out" / "trace").iterdir())
    assert files == sorted(f"{r}_trial{i}.csv" for r in ("one_shot", "many_shot") for i in range(5))


@pytest.mark.parametrize("commands", [["train-base", "one-shot"], ["sweep"], ["trace"]])
def test_reruns_are_byte_identical(tmp_path, commands):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        cfg = write_cfg(d)
        for c in commands:
            assert main([c, str(cfg)]) == 0
        outs.append(snapshot(d / "out"))
    assert outs[0].keys() == outs[1].keys() and outs[0] == outs[1]


def test_idx_dataset_via_cli(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 40).astype(np.uint8)
    images = (rng.uniform(size=(120, 8, 8)) * 60 + labels[:, None, None] * 60).astype(np.uint8)
    write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
    data = copy.deepcopy(TINY)
    data["dataset"] = {"kind": "idx", "images": "img", "labels": "lab"}
    data["domains"] = {"c1": 2, "c2": 0}
    data["one_shot"]["buffer_capacity"] = 40
    assert main(["train-base", str(write_cfg(tmp_path, data))]) == 0
