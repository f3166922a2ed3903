"""``ecla`` command line: run experiments from YAML configs and export artifacts.

Verbs: ``run``, ``validate-config``, ``export-embeddings``, ``export-pseudo``.
Relative ``output_dir`` values are resolved against ``$ECLA_OUTPUT_ROOT``
(default: the current directory).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from .errors import ValidationError
from .gmm import GmmModel
from .model import ConceptModel, LossWeights, ModelConfig
from .nn import SgdConfig
from .replay import generate
from .tasks import (TaskDataset, TaskSequence, few_shot_split, harmonize_resolution, load_idx_task,
                    make_permuted_task, make_synthetic_sequence, resize_images, subset)
from .trainer import Method, ReplayMode, RunResult, TrainConfig, run_sequence

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "ECLA_OUTPUT_ROOT"
BENCHMARKS = ("permuted", "cross_domain", "synthetic")
METRICS_COLUMNS = ("step", "learning_task", "eval_task", "accuracy")
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

log = logging.getLogger("ecla")


@dataclass
class DataConfig:
    # permuted: either ``root`` holding the four standard MNIST file names, or explicit paths
    root: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # cross_domain: one entry per task, each with the four path keys and an optional name
    domains: List[Dict[str, str]] = field(default_factory=list)
    n_train: Optional[int] = 10000
    n_test: Optional[int] = 2000
    image_side: Optional[int] = 14
    num_classes: int = 10
    # synthetic
    dim: int = 20
    n: int = 500
    domain_shift: float = 1.0
    separation: float = 6.0
    noise: float = 1.0


@dataclass
class ModelSection:
    embed_dim: int = 16
    hidden: List[int] = field(default_factory=lambda: [256, 64])
    hidden_activation: str = "relu"


@dataclass
class TrainSection:
    # defaults mirror TrainConfig / SgdConfig / LossWeights
    epochs_per_task: int = 10
    first_task_epochs: Optional[int] = None
    learning_rate: float = 0.05
    momentum: float = 0.9
    minibatch_size: int = 64
    clip_norm: Optional[float] = 5.0
    gamma: float = 1.0
    eta: float = 0.5
    lambda_: float = 0.5
    num_projections: int = 50
    n_er: Optional[int] = None
    em_iters: int = 1
    eval_every: int = 50
    replay_mode: str = "epoch"
    balanced_replay: bool = True


@dataclass
class ExperimentConfig:
    benchmark: str
    method: str = "ECLA"
    num_tasks: int = 3
    labels_per_class: int = 5
    seed: int = 0
    output_dir: str = "runs/experiment"
    schema_version: int = SCHEMA_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            method=Method(self.method),
            epochs_per_task=t.epochs_per_task,
            first_task_epochs=t.first_task_epochs,
            sgd=SgdConfig(t.learning_rate, t.momentum, t.minibatch_size, self.seed, t.clip_norm),
            weights=LossWeights(t.gamma, t.eta, t.lambda_),
            num_projections=t.num_projections,
            n_er=t.n_er,
            em_iters=t.em_iters,
            eval_every=t.eval_every,
            replay_mode=ReplayMode(t.replay_mode),
            balanced_replay=t.balanced_replay,
            seed=self.seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed YAML mapping and check its values."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a YAML mapping")
    raw = dict(raw)
    version = raw.get("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    data = _section(DataConfig, raw.pop("data", None), "data")
    model = _section(ModelSection, raw.pop("model", None), "model")
    train = _section(TrainSection, raw.pop("train", None), "train")
    cfg = _section(ExperimentConfig, raw, "config")
    cfg.data, cfg.model, cfg.train = data, model, train
    if cfg.benchmark not in BENCHMARKS:
        raise ValidationError(f"benchmark must be one of {list(BENCHMARKS)}, got {cfg.benchmark!r}")
    try:
        Method(cfg.method)
    except ValueError:
        raise ValidationError(f"method must be one of {[m.value for m in Method]}, got {cfg.method!r}")
    if cfg.num_tasks < 1 or cfg.labels_per_class < 1:
        raise ValidationError("num_tasks and labels_per_class must be >= 1")
    cfg.train_config()  # value checks live in the library dataclasses
    return cfg


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    with path.open() as fh:
        raw = yaml.safe_load(fh)
    cfg = parse_config(raw)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _idx_paths(entry: Dict[str, Optional[str]], where: str) -> Dict[str, Path]:
    root = entry.get("root")
    out = {}
    for key, default in MNIST_FILES.items():
        value = entry.get(key)
        if value is None and root is not None:
            value = str(Path(root) / default)
        if value is None:
            raise ValidationError(f"{where}: missing '{key}' (or 'root')")
        out[key] = Path(value)
    return out


def dataset_paths(cfg: ExperimentConfig) -> List[Path]:
    """Every file the config refers to."""
    if cfg.benchmark == "permuted":
        return list(_idx_paths(asdict(cfg.data), "data").values())
    if cfg.benchmark == "cross_domain":
        if not cfg.data.domains:
            raise ValidationError("data.domains must list one dataset per task")
        paths = []
        for i, dom in enumerate(cfg.data.domains):
            paths += list(_idx_paths(dom, f"data.domains[{i}]").values())
        return paths
    return []


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    return out


def validate(cfg: ExperimentConfig) -> Path:
    """Check referenced files exist and the output directory is writable; return the latter."""
    for p in dataset_paths(cfg):
        if not p.is_file():
            raise ValidationError(f"dataset file not found: {p}")
    if cfg.benchmark == "cross_domain" and len(cfg.data.domains) < cfg.num_tasks:
        raise ValidationError(f"num_tasks={cfg.num_tasks} but only {len(cfg.data.domains)} domains listed")
    out = resolve_output_dir(cfg)
    probe = out
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ValidationError(f"output_dir is not writable: {out}")
    return out


def _few_shot_rest(tasks: Sequence[TaskDataset], cfg: ExperimentConfig) -> TaskSequence:
    rest = [few_shot_split(t, cfg.labels_per_class, cfg.seed + i) for i, t in enumerate(tasks[1:], 1)]
    return TaskSequence([tasks[0]] + rest)


def build_sequence(cfg: ExperimentConfig) -> TaskSequence:
    d = cfg.data
    if cfg.benchmark == "synthetic":
        seq = make_synthetic_sequence(d.num_classes, d.dim, d.n, cfg.num_tasks, d.domain_shift, cfg.seed,
                                      n_test=d.n_test, separation=d.separation, noise=d.noise)
        return _few_shot_rest(seq.tasks, cfg)
    if cfg.benchmark == "permuted":
        p = _idx_paths(asdict(d), "data")
        base = load_idx_task("mnist", p["train_images"], p["train_labels"], p["test_images"],
                             p["test_labels"], d.num_classes)
        base = subset(base, d.n_train, d.n_test, cfg.seed)
        if d.image_side:
            base = resize_images(base, d.image_side)
        tasks = [base] + [make_permuted_task(base, 1000 * cfg.seed + t, name=f"permuted-{t + 1}")
                          for t in range(1, cfg.num_tasks)]
        return _few_shot_rest(tasks, cfg)
    loaded = []
    for i, dom in enumerate(d.domains[: cfg.num_tasks]):
        p = _idx_paths(dom, f"data.domains[{i}]")
        task = load_idx_task(dom.get("name", f"domain-{i + 1}"), p["train_images"], p["train_labels"],
                             p["test_images"], p["test_labels"], d.num_classes)
        loaded.append(subset(task, d.n_train, d.n_test, cfg.seed + i))
    return _few_shot_rest(harmonize_resolution(loaded), cfg)


def build_model(cfg: ExperimentConfig, sequence: TaskSequence) -> ConceptModel:
    m = cfg.model
    mc = ModelConfig(sequence.d, sequence.num_classes, m.embed_dim, tuple(m.hidden), m.hidden_activation)
    return ConceptModel.build(mc, cfg.seed)


def write_metrics(path: Path, result: RunResult) -> None:
    """Learning curves with 1-based task ids; rows in step order."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for step, learning, evaluated, acc in result.matrix.curves:
            w.writerow([step, learning + 1, evaluated + 1, repr(float(acc))])


def write_matrix(path: Path, result: RunResult) -> None:
    entries = result.matrix.entries
    T = entries.shape[0]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{s + 1}" for s in range(T)])
        for t in range(T):
            w.writerow([t + 1] + ["" if math.isnan(v) else repr(float(v)) for v in entries[t]])


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[Path] = None) -> RunResult:
    """Build the sequence and model, train, and write every output file."""
    out = validate(cfg) if output_dir is None else Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sequence = build_sequence(cfg)
    model = build_model(cfg, sequence)
    result = run_sequence(model, sequence, cfg.train_config(), checkpoint_dir=out / "checkpoints")
    write_metrics(out / "metrics.csv", result)
    write_matrix(out / "matrix.csv", result)
    with (out / "config.yaml").open("w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return result


def write_embeddings(path: Path, model: ConceptModel, sequence: TaskSequence) -> int:
    rows = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "class_label"] + [f"z_{i + 1}" for i in range(model.embed_dim)])
        for t, task in enumerate(sequence, 1):
            z = model.encode(task.test_x)
            for label, row in zip(task.test_y, z):
                w.writerow([t, int(label)] + [repr(float(v)) for v in row])
            rows += z.shape[0]
    return rows


def image_grid(x: np.ndarray) -> np.ndarray:
    """Tile rows of ``x`` into one 8-bit image.

    Square rows become side x side tiles on a near-square grid; other widths
    become one-pixel-high strips stacked vertically.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    n, d = x.shape
    if n == 0:
        return np.zeros((0, 0), dtype=np.uint8)
    pixels = np.round(x * 255.0).astype(np.uint8)
    side = int(round(math.sqrt(d)))
    if side * side != d:
        return pixels
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    grid = np.zeros((rows * side, cols * side), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * side:(r + 1) * side, c * side:(c + 1) * side] = pixels[i].reshape(side, side)
    return grid


def write_pgm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def export_pseudo(model: ConceptModel, gmm: GmmModel, n: int, out_path: Path, seed: int = 0) -> Path:
    """Decode ``n`` balanced GMM draws to a PGM grid; labels go to ``<out>.labels.csv``."""
    out_path = Path(out_path)
    if n > 0:
        pseudo = generate(gmm, model, n, np.random.default_rng(seed), balanced=n >= gmm.num_components)
        x, y = pseudo.x_er, pseudo.y_er
    else:
        x, y = np.zeros((0, model.input_dim)), np.zeros(0, dtype=np.int64)
    write_pgm(out_path, image_grid(x))
    labels_path = out_path.with_name(out_path.name + ".labels.csv")
    with labels_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "class_label"])
        for i, label in enumerate(y):
            w.writerow([i, int(label)])
    return labels_path


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    out = validate(cfg)
    result = run_experiment(cfg, out)
    final = result.matrix.entries[-1]
    print(f"wrote {out}; final accuracies: " + ", ".join(f"{a:.4f}" for a in final))
    return 0


def _cmd_validate(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = validate(cfg)
    print(f"config OK: benchmark={cfg.benchmark} method={cfg.method} output_dir={out}")
    return 0


def _cmd_export_embeddings(args) -> int:
    cfg = load_config(args.config, args.seed)
    validate(cfg)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    model = ConceptModel.load(ckpt)
    sequence = build_sequence(cfg)
    if sequence.d != model.input_dim:
        raise ValidationError(f"checkpoint expects d={model.input_dim}, dataset has d={sequence.d}")
    rows = write_embeddings(Path(args.out), model, sequence)
    print(f"wrote {rows} embeddings to {args.out}")
    return 0


def _cmd_export_pseudo(args) -> int:
    for p in (args.checkpoint, args.gmm):
        if not Path(p).is_file():
            raise ValidationError(f"checkpoint not found: {p}")
    if args.n < 0:
        raise ValidationError("-n must be >= 0")
    labels = export_pseudo(ConceptModel.load(args.checkpoint), GmmModel.load(args.gmm), args.n,
                           Path(args.out), args.seed or 0)
    print(f"wrote {args.out} and {labels}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecla", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    run = with_config("run", "train a method over a task sequence and write metrics")
    run.add_argument("--output-dir", default=None, help="override output_dir from the config")
    run.set_defaults(func=_cmd_run)
    with_config("validate-config", "check a config without running it").set_defaults(func=_cmd_validate)
    emb = with_config("export-embeddings", "write test-set embeddings of every task to CSV")
    emb.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    emb.add_argument("--out", required=True, help="output CSV path")
    emb.set_defaults(func=_cmd_export_embeddings)
    pse = sub.add_parser("export-pseudo", help="decode GMM samples into a PGM image grid")
    pse.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    pse.add_argument("--gmm", required=True, help="GMM checkpoint (.npz)")
    pse.add_argument("-n", type=int, default=64, help="number of pseudo-images")
    pse.add_argument("--out", required=True, help="output .pgm path")
    pse.add_argument("--seed", type=int, default=0)
    pse.set_defaults(func=_cmd_export_pseudo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, ValueError) as exc:
        print(f"ecla {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
