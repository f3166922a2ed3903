import csv

import numpy as np
import pytest
import yaml

from ecla import cli
from ecla.errors import ValidationError
from ecla.gmm import GmmModel
from ecla.model import ConceptModel, ModelConfig
from ecla.tasks import write_idx


def synthetic_config(tmp_path, **overrides):
    cfg = {
        "schema_version": 1,
        "benchmark": "synthetic",
        "method": "ECLA",
        "num_tasks": 2,
        "labels_per_class": 3,
        "seed": 0,
        "output_dir": str(tmp_path / "out"),
        "data": {"num_classes": 3, "dim": 6, "n": 60, "n_test": 30},
        "model": {"embed_dim": 4, "hidden": [8]},
        "train": {"epochs_per_task": 2, "first_task_epochs": 3, "minibatch_size": 16,
                  "eval_every": 3, "num_projections": 5},
    }
    for key, value in overrides.items():
        cfg[key] = value
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_all_outputs(tmp_path, capsys):
    path = synthetic_config(tmp_path)
    assert cli.main(["run", str(path)]) == 0
    out = tmp_path / "out"
    rows = read_rows(out / "metrics.csv")
    assert rows[0] == ["step", "learning_task", "eval_task", "accuracy"]
    assert all(0.0 <= float(r[3]) <= 1.0 for r in rows[1:])
    assert {r[1] for r in rows[1:]} == {"1", "2"}
    matrix = read_rows(out / "matrix.csv")
    assert matrix[0] == ["after_task", "task_1", "task_2"]
    assert matrix[1][2] == ""
    echo = yaml.safe_load((out / "config.yaml").read_text())
    assert echo["benchmark"] == "synthetic" and echo["schema_version"] == 1
    assert (out / "checkpoints" / "task2_model.npz").is_file()
    assert (out / "checkpoints" / "task2_gmm.npz").is_file()


def test_run_twice_is_byte_identical(tmp_path):
    path = synthetic_config(tmp_path)
    cli.main(["run", str(path), "--output-dir", str(tmp_path / "a")])
    cli.main(["run", str(path), "--output-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override_changes_run(tmp_path):
    path = synthetic_config(tmp_path)
    cli.main(["run", str(path), "--output-dir", str(tmp_path / "a")])
    cli.main(["run", str(path), "--seed", "4", "--output-dir", str(tmp_path / "b")])
    assert yaml.safe_load((tmp_path / "b" / "config.yaml").read_text())["seed"] == 4
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_missing_dataset_path_named(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "train-images-idx3-ubyte"
    path = synthetic_config(tmp_path, benchmark="permuted",
                            data={"root": str(tmp_path / "nowhere")})
    assert cli.main(["run", str(path)]) != 0
    assert str(missing) in capsys.readouterr().err
    assert cli.main(["validate-config", str(path)]) != 0


def test_validate_config_ok_and_bad_schema(tmp_path, capsys):
    assert cli.main(["validate-config", str(synthetic_config(tmp_path))]) == 0
    bad = synthetic_config(tmp_path, schema_version=99)
    assert cli.main(["validate-config", str(bad)]) != 0
    assert "schema_version" in capsys.readouterr().err


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ValidationError, match="unknown keys"):
        cli.parse_config({"schema_version": 1, "benchmark": "synthetic", "train": {"lr": 1}})


def test_output_root_env(tmp_path, monkeypatch):
    path = synthetic_config(tmp_path, output_dir="rel/run")
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", str(path)]) == 0
    assert (tmp_path / "root" / "rel" / "run" / "metrics.csv").is_file()


def test_export_embeddings(tmp_path):
    path = synthetic_config(tmp_path)
    cli.main(["run", str(path)])
    ckpt = tmp_path / "out" / "checkpoints" / "task2_model.npz"
    out1, out2 = tmp_path / "e1.csv", tmp_path / "e2.csv"
    assert cli.main(["export-embeddings", str(path), "--checkpoint", str(ckpt), "--out", str(out1)]) == 0
    cli.main(["export-embeddings", str(path), "--checkpoint", str(ckpt), "--out", str(out2)])
    rows = read_rows(out1)
    assert rows[0] == ["task_id", "class_label", "z_1", "z_2", "z_3", "z_4"]
    assert len(rows) - 1 == 2 * 30
    assert out1.read_bytes() == out2.read_bytes()


def test_embedding_header_width_for_sixteen_dims(tmp_path, rng):
    model = ConceptModel.build(ModelConfig(6, 3, 16, (8,)), 0)
    from ecla.tasks import TaskDataset, TaskSequence
    seq = TaskSequence([TaskDataset("a", rng.uniform(size=(4, 6)), [0, 1, 2, 0], rng.uniform(size=(5, 6)),
                                    [0, 1, 2, 0, 1])])
    assert cli.write_embeddings(tmp_path / "e.csv", model, seq) == 5
    assert len(read_rows(tmp_path / "e.csv")[0]) == 18


def _pseudo_inputs(tmp_path, d=16, f=3):
    model = ConceptModel.build(ModelConfig(d, 2, f, (8,)), 0)
    mixture = GmmModel(np.array([0.5, 0.5]), np.stack([np.zeros(f), np.ones(f)]), np.ones((2, f)),
                       np.array([0, 1]))
    model.save(tmp_path / "m.npz")
    mixture.save(tmp_path / "g.npz")
    return tmp_path / "m.npz", tmp_path / "g.npz"


def test_export_pseudo_grid_and_labels(tmp_path):
    m, g = _pseudo_inputs(tmp_path)
    out = tmp_path / "p.pgm"
    assert cli.main(["export-pseudo", "--checkpoint", str(m), "--gmm", str(g), "-n", "5", "--out", str(out)]) == 0
    img = cli.read_pgm(out)
    assert img.shape == (2 * 4, 3 * 4)
    labels = read_rows(tmp_path / "p.pgm.labels.csv")
    assert len(labels) - 1 == 5


def test_export_pseudo_zero_is_empty(tmp_path):
    m, g = _pseudo_inputs(tmp_path)
    out = tmp_path / "p.pgm"
    assert cli.main(["export-pseudo", "--checkpoint", str(m), "--gmm", str(g), "-n", "0", "--out", str(out)]) == 0
    assert cli.read_pgm(out).shape == (0, 0)
    assert len(read_rows(tmp_path / "p.pgm.labels.csv")) == 1


def test_image_grid_clamps_before_quantizing():
    grid = cli.image_grid(np.array([[-0.5, 0.5, 1.5, 1.0]]))
    assert grid.tolist() == [[0, 128], [255, 255]]


def test_permuted_benchmark_from_idx_files(tmp_path):
    rng = np.random.default_rng(0)
    root = tmp_path / "mnist"
    root.mkdir()
    for split, n in (("train", 60), ("t10k", 20)):
        write_idx(root / f"{split}-images-idx3-ubyte", rng.integers(0, 256, (n, 4, 4)).astype(np.uint8))
        write_idx(root / f"{split}-labels-idx1-ubyte", (np.arange(n) % 3).astype(np.uint8))
    path = synthetic_config(tmp_path, benchmark="permuted",
                            data={"root": str(root), "n_train": 45, "n_test": 15, "image_side": 2,
                                  "num_classes": 3})
    assert cli.main(["run", str(path)]) == 0
    seq = cli.build_sequence(cli.load_config(path))
    assert seq.d == 4 and len(seq) == 2 and seq[1].labeled_idx.size == 9
