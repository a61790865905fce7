import csv
import json

import numpy as np
import pytest

from lmcridge.cli import main
from lmcridge.errors import ConfigError, EmptyOutputError, PartialRunError
from lmcridge.experiment import (
    COMPARE_COLUMNS, ExperimentConfig, compare_predicted_actual, export_curve_evolution,
    run_experiment,
)
from lmcridge.net import Network
from lmcridge.trainer import ForkSpec, TrainConfig, fork_and_train

from conftest import random_classification


def small_config(**over):
    cfg = {
        "name": "small",
        "dataset": {"kind": "spiral", "n": 120, "seed": 1, "classes": 3, "noise": 0.1,
                    "subset": 90, "subset_seed": 2},
        "network": {"mlp": {"hidden": [6], "activation": "tanh"}},
        "train": {"epochs": 6, "batch_size": 16, "lr": 0.1, "lr_decay_epochs": [4],
                  "momentum": 0.9, "weight_decay": 1e-4, "seed": 0},
        "forks": [{"fork_epoch": 0, "child_seeds": [1, 2], "child_epochs": 4},
                  {"fork_epoch": 5, "child_seeds": [1, 2], "child_epochs": 4}],
        "analysis": {"grid": 9, "metrics": ["loss", "error_rate"], "layerwise": "all",
                     "layer_sets": [["fc1", "fc2"]], "geometry": ["origin", "fork_point"],
                     "evolution": {"stride": 2}},
    }
    cfg.update(over)
    return cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = write_config(root / "cfg.json", small_config(toy={"minima": [-1, 1]}))
    out = run_experiment(cfg, root / "run")
    return cfg, out, json.loads((out / "manifest.json").read_text())


def test_toy_only_config(tmp_path):
    cfg = write_config(tmp_path / "toy.json", {"name": "t", "toy": {"minima": [-1, 1], "grid_size": 101}})
    out = run_experiment(cfg, tmp_path / "run")
    assert (out / "toy" / "toy_barriers.csv").exists() and (out / "toy" / "toy_trace.csv").exists()
    assert not list(out.rglob("*.ckpt"))
    row = read_rows(out / "toy" / "toy_barriers.csv")[0]
    assert float(row["barrier"]) == 1.0 and float(row["predicted"]) == 4.0


def test_two_fork_layout(small_run):
    _, out, manifest = small_run
    forks = sorted(p.name for p in out.glob("fork*"))
    assert forks == ["fork0_e000", "fork1_e005"]
    for f in forks:
        for child in ("child1", "child2"):
            assert len(list((out / f / child).glob("*.ckpt"))) == 5
        assert (out / f / "barrier.csv").exists() and (out / f / "fork_manifest.json").exists()
    rows = read_rows(out / "compare_predicted_actual.csv")
    assert [int(r["fork_epoch"]) for r in rows] == [0, 5]
    assert list(rows[0]) == COMPARE_COLUMNS
    assert len(manifest["forks"]) == 2 and manifest["dataset_id"]


def test_every_row_carries_run_hash(small_run):
    _, out, manifest = small_run
    fork_hashes = {f["config_hash"] for f in manifest["forks"]}
    for path in out.rglob("*.csv"):
        for row in read_rows(path):
            assert row["run_hash"] in fork_hashes | {manifest["config_hash"]}, path


def test_rerun_reproduces_hashes(small_run, tmp_path):
    cfg, _, manifest = small_run
    again = json.loads((run_experiment(cfg, tmp_path / "again") / "manifest.json").read_text())
    assert again["results"] == manifest["results"]
    assert again["result_hash"] == manifest["result_hash"]


def test_rerun_in_place_is_idempotent(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_config(forks=small_config()["forks"][:1]))
    first = json.loads((run_experiment(cfg, tmp_path / "r") / "manifest.json").read_text())
    second = json.loads((run_experiment(cfg, tmp_path / "r") / "manifest.json").read_text())
    assert first["result_hash"] == second["result_hash"]


def test_partial_run_protocol(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_config(forks=small_config()["forks"][:1]))
    ref = json.loads((run_experiment(cfg, tmp_path / "ref") / "manifest.json").read_text())
    out = tmp_path / "r"
    run_experiment(cfg, out)
    (out / "manifest.json").unlink()
    (out / "fork0_e000" / "child2" / "e0003.ckpt").unlink()
    with pytest.raises(PartialRunError):
        run_experiment(cfg, out)
    resumed = json.loads((run_experiment(cfg, out, resume=True) / "manifest.json").read_text())
    assert resumed["result_hash"] == ref["result_hash"]
    (out / "manifest.json").unlink()
    fresh = json.loads((run_experiment(cfg, out, overwrite=True) / "manifest.json").read_text())
    assert fresh["result_hash"] == ref["result_hash"]


def test_different_config_in_same_dir_refused(tmp_path):
    a = write_config(tmp_path / "a.json", {"toy": {"minima": [-1, 1], "grid_size": 11}})
    b = write_config(tmp_path / "b.json", {"toy": {"minima": [-2, 1], "grid_size": 11}})
    run_experiment(a, tmp_path / "r")
    with pytest.raises(PartialRunError):
        run_experiment(b, tmp_path / "r")


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(small_config(analysis={"layerwise": ["fc7"]}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(small_config(forks=[{"fork_epoch": 9}]))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(small_config(forks=[{"fork_epoch": 1, "child_seeds": [4, 4]}]))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(small_config(bogus=1))
    ok = ExperimentConfig.from_dict(small_config(forks=[{"fork_epoch": 1, "child_seeds": [4, 4]}],
                                                 allow_equal_seeds=True))
    assert ok.forks[0].child_seeds == (4, 4)


def test_config_hash_canonical():
    a = ExperimentConfig.from_dict(small_config())
    shuffled = json.loads(json.dumps(small_config(), sort_keys=False))
    shuffled = dict(reversed(list(shuffled.items())))
    assert ExperimentConfig.from_dict(shuffled).hash == a.hash
    assert ExperimentConfig.from_dict(small_config(output_dir="/elsewhere")).hash == a.hash
    assert a.with_seed(3).hash != a.hash and a.with_seed(3).train.seed == 3


# ------------------------------------------------------------- exporters

@pytest.fixture(scope="module")
def tiny_fork():
    net = Network.mlp(2, [4], 2, activation="tanh")
    data = random_classification(24, 2, 2, seed=9)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=0.1, momentum=0.0, weight_decay=0.0)
    run = fork_and_train(net, data, cfg, ForkSpec(0, (1, 2), child_epochs=6))
    same = fork_and_train(net, data, cfg, ForkSpec(0, (3, 3), child_epochs=6), force=True)
    return net, data, run, same


def test_evolution_strides(tiny_fork):
    net, data, run, _ = tiny_fork
    epochs = lambda rows: sorted({r["child_epoch"] for r in rows})
    assert epochs(export_curve_evolution(net, run, data, 6, grid=5)) == [0, 6]
    assert epochs(export_curve_evolution(net, run, data, 4, grid=5)) == [0, 4, 6]
    assert epochs(export_curve_evolution(net, run, data, 1, grid=5)) == list(range(7))
    with pytest.raises(EmptyOutputError):
        export_curve_evolution(net, run, data, 7, grid=5)


def test_evolution_identical_children(tiny_fork):
    net, data, _, same = tiny_fork
    rows = export_curve_evolution(net, same, data, 2, "error_rate", grid=5)
    for r in rows:
        assert r["barrier"] == 0.0
        assert r["value"] == net.error_rate(same.child1_checkpoints[r["child_epoch"]], data)


def test_compare_identical_children(tiny_fork):
    net, data, run, same = tiny_fork
    rows = compare_predicted_actual(net, [run, same], data, grid=5)
    assert [r["fork_epoch"] for r in rows] == [0, 0]
    r = [r for r in rows if r["distance"] == 0.0][0]
    assert (r["actual_max_barrier"], r["predicted_half"], r["distance"]) == (0.0, 0.0, 0.0)


def test_compare_sorted(tiny_fork):
    net, data, run, _ = tiny_fork
    late = fork_and_train(net, data, run.config, ForkSpec(1, (1, 2), child_epochs=2))
    rows = compare_predicted_actual(net, [late, run], data, grid=5)
    assert [r["fork_epoch"] for r in rows] == [0, 1]


# ------------------------------------------------------------------- CLI

def test_cli_toy_and_svg_do_not_change_csv(tmp_path, capsys):
    assert main(["toy", "--config", "preset:toy", "--out", str(tmp_path / "a")]) == 0
    assert main(["toy", "--config", "preset:toy", "--out", str(tmp_path / "b"), "--svg"]) == 0
    assert (tmp_path / "b" / "toy" / "toy_trace.svg").exists()
    for name in ("toy_barriers.csv", "toy_trace.csv"):
        assert (tmp_path / "a" / "toy" / name).read_bytes() == (tmp_path / "b" / "toy" / name).read_bytes()
    assert "results" in capsys.readouterr().out


def test_cli_stages_and_seed_override(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", small_config(forks=small_config()["forks"][:1]))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "parent" / "e0006.ckpt").exists()
    assert not list((tmp_path / "t").glob("fork*"))
    assert main(["barrier", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--seed-override", "7"]) == 0
    stored = json.loads((tmp_path / "s" / "config.json").read_text())
    assert stored["train"]["seed"] == 7
    assert main(["barrier", "--config", str(cfg), "--out", str(tmp_path / "t"), "--resume"]) == 0
    assert (tmp_path / "t" / "compare_predicted_actual.csv").exists()


def test_cli_errors(tmp_path, capsys):
    assert main(["toy", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert main(["toy", "--config", "preset:nope", "--out", str(tmp_path / "x")]) == 1
    assert main(["toy", "--config", "preset:toy"]) == 2
    with pytest.raises(SystemExit):
        main(["toy", "--config", "preset:toy", "--resume", "--overwrite"])
    assert main(["preset", "desk"]) == 0
    assert json.loads(capsys.readouterr().out.split("\n", 0)[0])["name"] == "desk"
