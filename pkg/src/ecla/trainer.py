"""Sequential training: ECLA and the BP / FR / CLEER comparison baselines.

Step budget: every method takes ``ceil(n_t / batch)`` SGD steps per epoch on
task ``t`` (FR uses the size of its stored union instead), so methods that
see only a handful of labels still get the same number of updates and the
comparison isolates what each one trains on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import gmm as gmm_mod
from .errors import ValidationError
from .gmm import GmmModel
from .model import ConceptModel, LossWeights, loss_ecla, loss_task1
from .nn import Sgd, SgdConfig
from .replay import PseudoDataset, generate
from .swd import make_projections
from .tasks import TaskDataset, TaskSequence

log = logging.getLogger(__name__)


class Method(str, Enum):
    ECLA = "ECLA"
    BP = "BP"
    FR = "FR"
    CLEER = "CLEER"


class ReplayMode(str, Enum):
    EPOCH = "epoch"  # fresh pseudo-data every epoch
    TASK = "task"    # one draw per task


@dataclass
class TrainConfig:
    method: Method = Method.ECLA
    epochs_per_task: int = 10
    first_task_epochs: Optional[int] = None  # defaults to epochs_per_task
    sgd: SgdConfig = field(default_factory=SgdConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    num_projections: int = 50
    n_er: Optional[int] = None  # defaults to the current task's training-set size
    em_iters: int = 1
    eval_every: int = 50
    replay_mode: ReplayMode = ReplayMode.EPOCH
    balanced_replay: bool = True
    seed: int = 0

    def __post_init__(self):
        self.method = Method(self.method)
        self.replay_mode = ReplayMode(self.replay_mode)
        if self.epochs_per_task < 0 or (self.first_task_epochs or 0) < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.num_projections < 1 or self.em_iters < 1 or self.eval_every < 1:
            raise ValidationError("num_projections, em_iters and eval_every must be >= 1")
        if self.n_er is not None and self.n_er < 0:
            raise ValidationError("n_er must be >= 0")


@dataclass
class AccuracyMatrix:
    """``entries[t, s]``: test accuracy on task ``s`` right after finishing task ``t``."""

    num_tasks: int
    entries: np.ndarray = None
    curves: List[Tuple[int, int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.entries is None:
            self.entries = np.full((self.num_tasks, self.num_tasks), np.nan)

    def record_stage(self, t: int, accuracies) -> None:
        self.entries[t, : len(accuracies)] = accuracies

    def record_curve(self, step: int, learning_task: int, accuracies) -> None:
        for s, acc in enumerate(accuracies):
            self.curves.append((step, learning_task, s, float(acc)))

    @property
    def completed(self) -> int:
        return int(np.sum(~np.isnan(np.diag(self.entries))))

    def final(self) -> np.ndarray:
        """Accuracies after the last completed task."""
        t = self.completed - 1
        return self.entries[t, : t + 1]


def forgetting_metrics(matrix) -> Dict[str, float]:
    a = matrix.entries if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix, dtype=float)
    T = int(np.sum(~np.isnan(np.diag(a))))
    if T == 0:
        raise ValidationError("empty accuracy matrix")
    last = a[T - 1, :T]
    drops = [np.nanmax(a[s:T, s]) - a[T - 1, s] for s in range(T - 1)]
    return {"final_avg": float(np.mean(last)),
            "avg_forgetting": float(np.mean(drops)) if drops else 0.0}


def evaluate(model: ConceptModel, sequence: TaskSequence, upto_t: int) -> np.ndarray:
    """Test accuracy on tasks ``0..upto_t``."""
    return np.array([float(np.mean(model.predict(task.test_x) == task.test_y))
                     for task in sequence.tasks[: upto_t + 1]])


def _batches(order: np.ndarray, size: int):
    for s in range(0, order.shape[0], size):
        yield order[s:s + size]


def stratified_batch(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced batch; the whole pool when it fits in ``size``."""
    if labels.shape[0] <= size:
        return np.arange(labels.shape[0])
    classes = np.unique(labels)
    per = max(1, size // classes.size)
    picks = []
    for c in classes:
        rows = np.flatnonzero(labels == c)
        picks.append(rng.choice(rows, size=min(per, rows.size), replace=False))
    return np.sort(np.concatenate(picks))


class _Tracker:
    """Global step counter plus periodic evaluation into an AccuracyMatrix."""

    def __init__(self, sequence: Optional[TaskSequence], matrix: Optional[AccuracyMatrix], eval_every: int):
        self.sequence = sequence
        self.matrix = matrix
        self.eval_every = eval_every
        self.step = 0

    def tick(self, model: ConceptModel, t: int) -> None:
        self.step += 1
        if self.matrix is not None and self.step % self.eval_every == 0:
            self.matrix.record_curve(self.step, t, evaluate(model, self.sequence, t))

    def end_task(self, model: ConceptModel, t: int) -> None:
        if self.matrix is None:
            return
        acc = evaluate(model, self.sequence, t)
        if not self.matrix.curves or self.matrix.curves[-1][0] != self.step:
            self.matrix.record_curve(self.step, t, acc)
        self.matrix.record_stage(t, acc)
        log.info("after task %d: %s", t + 1, np.round(acc, 4).tolist())


def _task_rng(config: TrainConfig, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, t]))


def _train_combined(model: ConceptModel, x: np.ndarray, y: np.ndarray, steps_per_epoch: int,
                    epochs: int, config: TrainConfig, rng: np.random.Generator,
                    tracker: Optional[_Tracker], t: int, sample_batches: bool = False) -> List[float]:
    """Minibatch SGD on the first-task combined loss.

    With ``sample_batches`` each step draws a class-balanced batch (used when
    the labeled pool is much smaller than the step budget); otherwise batches
    sweep a fresh permutation of the data each epoch.
    """
    opt = Sgd(model.layers, config.sgd)
    bs = config.sgd.minibatch_size
    losses = []
    for _ in range(epochs):
        if sample_batches:
            batches = (stratified_batch(y, bs, rng) for _ in range(steps_per_epoch))
        else:
            batches = _batches(rng.permutation(x.shape[0]), bs)
        epoch_loss = []
        for idx in batches:
            loss, _ = loss_task1(model, x[idx], y[idx], config.weights)
            opt.step()
            epoch_loss.append(loss)
            if tracker is not None:
                tracker.tick(model, t)
        losses.append(float(np.mean(epoch_loss)))
    return losses


def train_first_task(model: ConceptModel, task: TaskDataset, config: TrainConfig,
                     tracker: Optional[_Tracker] = None) -> Tuple[ConceptModel, GmmModel]:
    """Fit the combined loss on fully labeled data, then a labeled GMM on the embeddings."""
    if not task.fully_labeled:
        raise ValidationError(f"first task {task.name!r} must be fully labeled")
    epochs = config.epochs_per_task if config.first_task_epochs is None else config.first_task_epochs
    steps = math.ceil(task.n / config.sgd.minibatch_size)
    losses = _train_combined(model, task.train_x, task.train_y, steps, epochs, config,
                             _task_rng(config, 0), tracker, 0)
    if losses:
        log.info("task 1 loss: first epoch %.4f, last epoch %.4f", losses[0], losses[-1])
    gmm = gmm_mod.fit_labeled(model.encode(task.train_x), task.train_y,
                              classes=np.arange(task.num_classes))
    return model, gmm


def _check_coverage(task: TaskDataset) -> None:
    present = set(task.train_y[task.labeled_idx].tolist())
    missing = sorted(set(range(task.num_classes)) - present)
    if missing:
        raise ValidationError(f"task {task.name!r}: few-shot labels are missing classes {missing}")


def train_subsequent_task(model: ConceptModel, gmm: GmmModel, task: TaskDataset, config: TrainConfig,
                          t: int = 1, tracker: Optional[_Tracker] = None) -> Tuple[ConceptModel, GmmModel]:
    """One pass of the ECLA loop body for task index ``t`` (0-based, ``t >= 1``)."""
    _check_coverage(task)
    rng = _task_rng(config, t)
    bs = config.sgd.minibatch_size
    n_er = task.n if config.n_er is None else config.n_er
    x_lab, y_lab = task.labeled()
    opt = Sgd(model.layers, config.sgd)
    w = config.weights
    use_replay = n_er > 0
    # pseudo-data always come from the decoder as it was when the task began;
    # decoding with the live decoder lets replay drift along with the model
    generator = model.copy()
    pseudo: Optional[PseudoDataset] = None
    if use_replay and config.replay_mode is ReplayMode.TASK:
        pseudo = generate(gmm, generator, n_er, rng, config.balanced_replay)
    for epoch in range(config.epochs_per_task):
        if use_replay and config.replay_mode is ReplayMode.EPOCH:
            pseudo = generate(gmm, generator, n_er, rng, config.balanced_replay)
        losses = []
        for idx in _batches(rng.permutation(task.n), bs):
            few = stratified_batch(y_lab, bs, rng)
            if use_replay:
                er = stratified_batch(pseudo.y_er, bs, rng)
                proj = make_projections(config.num_projections, model.embed_dim, rng)
                loss, _ = loss_ecla(model, x_lab[few], y_lab[few], task.train_x[idx],
                                    pseudo.x_er[er], pseudo.y_er[er], pseudo.z_er[er], w, proj, rng)
            else:
                # nothing to replay or match against: only the few-label combined loss remains
                loss, _ = loss_task1(model, x_lab[few], y_lab[few], w)
            opt.step()
            losses.append(loss)
            if tracker is not None:
                tracker.tick(model, t)
        log.debug("task %d epoch %d loss %.4f", t + 1, epoch + 1, float(np.mean(losses)))

    y_cur = np.full(task.n, gmm_mod.UNLABELED, dtype=np.int64)
    y_cur[task.labeled_idx] = task.train_y[task.labeled_idx]
    if pseudo is None:
        pseudo = generate(gmm, generator, max(n_er, gmm.num_components), rng, config.balanced_replay)
    gmm = gmm_mod.update_after_task(gmm, model.encode(task.train_x), y_cur,
                                    model.encode(pseudo.x_er), pseudo.y_er, passes=config.em_iters)
    return model, gmm


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    model: ConceptModel
    gmm: Optional[GmmModel]


def _checkpoint(checkpoint_dir, t: int, model: ConceptModel, gmm: Optional[GmmModel]) -> None:
    if checkpoint_dir is None:
        return
    path = Path(checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    model.save(path / f"task{t + 1}_model.npz")
    if gmm is not None:
        gmm.save(path / f"task{t + 1}_gmm.npz")


def run_ecla(model: ConceptModel, sequence: TaskSequence, config: TrainConfig,
             checkpoint_dir=None) -> RunResult:
    model = model.copy()
    T = len(sequence)
    matrix = AccuracyMatrix(T)
    tracker = _Tracker(sequence, matrix, config.eval_every)
    model, gmm = train_first_task(model, sequence[0].with_full_labels(), config, tracker)
    tracker.end_task(model, 0)
    _checkpoint(checkpoint_dir, 0, model, gmm)
    for t in range(1, T):
        model, gmm = train_subsequent_task(model, gmm, sequence[t], config, t, tracker)
        tracker.end_task(model, t)
        _checkpoint(checkpoint_dir, t, model, gmm)
    return RunResult(matrix, model, gmm)


def run_baseline_cleer(model: ConceptModel, sequence: TaskSequence, config: TrainConfig,
                       checkpoint_dir=None) -> RunResult:
    full = TaskSequence([t.with_full_labels() for t in sequence])
    return run_ecla(model, full, config, checkpoint_dir)


def run_baseline_bp(model: ConceptModel, sequence: TaskSequence, config: TrainConfig,
                    checkpoint_dir=None) -> RunResult:
    model = model.copy()
    matrix = AccuracyMatrix(len(sequence))
    tracker = _Tracker(sequence, matrix, config.eval_every)
    model, gmm = train_first_task(model, sequence[0].with_full_labels(), config, tracker)
    tracker.end_task(model, 0)
    _checkpoint(checkpoint_dir, 0, model, gmm)
    for t in range(1, len(sequence)):
        task = sequence[t]
        x, y = task.labeled()
        steps = math.ceil(task.n / config.sgd.minibatch_size)
        _train_combined(model, x, y, steps, config.epochs_per_task, config, _task_rng(config, t),
                        tracker, t, sample_batches=True)
        tracker.end_task(model, t)
        _checkpoint(checkpoint_dir, t, model, None)
    return RunResult(matrix, model, gmm)


def run_baseline_fr(model: ConceptModel, sequence: TaskSequence, config: TrainConfig,
                    checkpoint_dir=None) -> RunResult:
    model = model.copy()
    matrix = AccuracyMatrix(len(sequence))
    tracker = _Tracker(sequence, matrix, config.eval_every)
    model, gmm = train_first_task(model, sequence[0].with_full_labels(), config, tracker)
    tracker.end_task(model, 0)
    _checkpoint(checkpoint_dir, 0, model, gmm)
    for t in range(1, len(sequence)):
        x = np.concatenate([task.train_x for task in sequence.tasks[: t + 1]])
        y = np.concatenate([task.train_y for task in sequence.tasks[: t + 1]])
        steps = math.ceil(x.shape[0] / config.sgd.minibatch_size)
        _train_combined(model, x, y, steps, config.epochs_per_task, config, _task_rng(config, t), tracker, t)
        tracker.end_task(model, t)
        _checkpoint(checkpoint_dir, t, model, None)
    return RunResult(matrix, model, gmm)


RUNNERS: Dict[Method, Callable[..., RunResult]] = {
    Method.ECLA: run_ecla,
    Method.BP: run_baseline_bp,
    Method.FR: run_baseline_fr,
    Method.CLEER: run_baseline_cleer,
}


def run_sequence(model: ConceptModel, sequence: TaskSequence, config: TrainConfig,
                 checkpoint_dir=None) -> RunResult:
    """Run ``config.method`` over the whole sequence from a copy of ``model``."""
    return RUNNERS[config.method](model, sequence, config, checkpoint_dir=checkpoint_dir)
