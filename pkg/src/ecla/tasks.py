"""Task datasets: IDX parsing, permuted-pixel tasks, few-shot splits, synthetic blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import special_ortho_group

from .errors import DimensionError, IdxFormatError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class TaskDataset:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    labeled_idx: Optional[np.ndarray] = None  # None means fully labeled
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.train_y = np.asarray(self.train_y, dtype=np.int64)
        self.test_y = np.asarray(self.test_y, dtype=np.int64)
        if self.train_x.shape[0] != self.train_y.shape[0] or self.test_x.shape[0] != self.test_y.shape[0]:
            raise DimensionError(f"task {self.name!r}: images and labels disagree on count")
        if self.train_x.shape[1] != self.test_x.shape[1]:
            raise DimensionError(f"task {self.name!r}: train and test dims differ")
        if self.num_classes is None:
            self.num_classes = int(max(self.train_y.max(initial=-1), self.test_y.max(initial=-1)) + 1)
        if self.labeled_idx is None:
            self.labeled_idx = np.arange(self.n)
        self.labeled_idx = np.asarray(self.labeled_idx, dtype=np.int64)
        if self.labeled_idx.size and (self.labeled_idx.min() < 0 or self.labeled_idx.max() >= self.n):
            raise ValidationError(f"task {self.name!r}: labeled_idx out of range")

    @property
    def n(self) -> int:
        return self.train_x.shape[0]

    @property
    def d(self) -> int:
        return self.train_x.shape[1]

    @property
    def fully_labeled(self) -> bool:
        return self.labeled_idx.size == self.n

    @property
    def unlabeled_idx(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.labeled_idx] = False
        return np.flatnonzero(mask)

    def labeled(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.train_x[self.labeled_idx], self.train_y[self.labeled_idx]

    def with_full_labels(self) -> "TaskDataset":
        return replace(self, labeled_idx=None)


@dataclass
class TaskSequence:
    tasks: List[TaskDataset]

    def __post_init__(self):
        if not self.tasks:
            raise ValidationError("a task sequence needs at least one task")
        dims = {t.d for t in self.tasks}
        if len(dims) != 1:
            raise DimensionError(f"tasks disagree on input dim: {sorted(dims)}")
        k = max(t.num_classes for t in self.tasks)
        for t in self.tasks:
            t.num_classes = k

    @property
    def d(self) -> int:
        return self.tasks[0].d

    @property
    def num_classes(self) -> int:
        return self.tasks[0].num_classes

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i) -> TaskDataset:
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic number", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim < 1:
        raise IdxFormatError(f"bad magic number 0x{int.from_bytes(raw[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(shape, dtype=np.int64))
    if len(raw) < header + size:
        raise IdxFormatError(f"truncated payload: expected {size} bytes, found {len(raw) - header}",
                             len(raw))
    if len(raw) > header + size:
        raise IdxFormatError("trailing bytes after payload", header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValidationError("only unsigned-byte IDX files are supported")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Read an image/label IDX pair into flattened [0, 1] pixel rows and int labels."""
    for p in (images_path, labels_path):
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    images = read_idx(images_path)
    if int.from_bytes(Path(images_path).read_bytes()[:4], "big") != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}", 0)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}", 0)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", 4)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def save_idx(images_path, labels_path, x, y, side: Optional[int] = None) -> None:
    """Write pixel rows in [0, 1] back to an IDX pair (values rounded to bytes)."""
    x = np.asarray(x, dtype=np.float64)
    side = side or int(round(np.sqrt(x.shape[1])))
    if side * side != x.shape[1]:
        raise DimensionError(f"row length {x.shape[1]} is not a square image")
    pixels = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    write_idx(images_path, pixels.reshape(-1, side, side))
    write_idx(labels_path, np.asarray(y).astype(np.uint8))


def load_idx_task(name, train_images, train_labels, test_images, test_labels,
                  num_classes: Optional[int] = None) -> TaskDataset:
    train_x, train_y = load_idx(train_images, train_labels)
    test_x, test_y = load_idx(test_images, test_labels)
    return TaskDataset(name, train_x, train_y, test_x, test_y, num_classes=num_classes)


def subset(task: TaskDataset, n_train: Optional[int], n_test: Optional[int], seed: int) -> TaskDataset:
    """Seeded random subset of the train and test splits (full labels)."""
    rng = np.random.default_rng(seed)

    def pick(n_total, n):
        if n is None or n >= n_total:
            return np.arange(n_total)
        return np.sort(rng.choice(n_total, size=n, replace=False))

    tr = pick(task.n, n_train)
    te = pick(task.test_x.shape[0], n_test)
    return TaskDataset(task.name, task.train_x[tr], task.train_y[tr], task.test_x[te],
                       task.test_y[te], num_classes=task.num_classes)


def pixel_permutation(d: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(d)


def make_permuted_task(base: TaskDataset, seed: int, permutation: Optional[np.ndarray] = None,
                       name: Optional[str] = None) -> TaskDataset:
    """Apply one fixed pixel shuffle (drawn from ``seed`` unless given) to every image."""
    perm = pixel_permutation(base.d, seed) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(base.d)):
        raise ValidationError("permutation must be a rearrangement of range(d)")
    return TaskDataset(name or f"{base.name}-perm{seed}", base.train_x[:, perm], base.train_y.copy(),
                       base.test_x[:, perm], base.test_y.copy(), base.labeled_idx.copy(),
                       base.num_classes)


def few_shot_split(task: TaskDataset, labels_per_class: int, seed: int) -> TaskDataset:
    """Keep exactly ``labels_per_class`` seeded-uniform labeled indices per class."""
    rng = np.random.default_rng(seed)
    chosen = []
    short = []
    for c in range(task.num_classes):
        rows = np.flatnonzero(task.train_y == c)
        if rows.size < labels_per_class:
            short.append((c, int(rows.size)))
            continue
        chosen.append(rng.choice(rows, size=labels_per_class, replace=False))
    if short:
        raise ValidationError(
            f"task {task.name!r}: classes with fewer than {labels_per_class} samples (class, count): {short}")
    return replace(task, labeled_idx=np.sort(np.concatenate(chosen)))


def make_synthetic_sequence(k: int, d: int, n: int, num_tasks: int, domain_shift: float, seed: int,
                            n_test: Optional[int] = None, separation: float = 4.0,
                            noise: float = 1.0) -> TaskSequence:
    """Gaussian-blob tasks; later tasks are rotated and translated copies.

    Task 1 has ``k`` isotropic blobs (``n // k`` points each, remainder to the
    lowest classes) with centres at distance ``separation`` from the origin.
    Task t > 1 maps every point through ``x -> R_t x + b_t`` where ``R_t`` is a
    seeded rotation by angle ``domain_shift * pi / 2`` in random planes and
    ``b_t`` a random vector of norm ``domain_shift * separation``. Finally all
    tasks share one affine rescaling into [0, 1].
    """
    if min(k, d, n, num_tasks) < 1:
        raise ValidationError("k, d, n and num_tasks must be >= 1")
    n_test = n if n_test is None else n_test
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((k, d))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)

    def blobs(m):
        counts = np.full(k, m // k)
        counts[: m % k] += 1
        y = np.repeat(np.arange(k), counts)
        x = centres[y] + noise * rng.standard_normal((m, d))
        perm = rng.permutation(m)
        return x[perm], y[perm]

    raw = []
    for t in range(num_tasks):
        tr_x, tr_y = blobs(n)
        te_x, te_y = blobs(n_test)
        if t > 0 and domain_shift != 0:
            rot = _partial_rotation(d, domain_shift * np.pi / 2, rng)
            shift = rng.standard_normal(d)
            shift *= domain_shift * separation / np.linalg.norm(shift)
            tr_x = tr_x @ rot.T + shift
            te_x = te_x @ rot.T + shift
        raw.append((tr_x, tr_y, te_x, te_y))
    if domain_shift == 0:
        # identical domains means identical data, not fresh draws from the same law
        raw = [raw[0]] * num_tasks
    lo = min(min(r[0].min(), r[2].min()) for r in raw)
    hi = max(max(r[0].max(), r[2].max()) for r in raw)
    scale = 1.0 / (hi - lo) if hi > lo else 1.0
    tasks = [TaskDataset(f"synthetic-{t + 1}", (tr_x - lo) * scale, tr_y, (te_x - lo) * scale, te_y,
                         num_classes=k)
             for t, (tr_x, tr_y, te_x, te_y) in enumerate(raw)]
    return TaskSequence(tasks)


def _partial_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle`` in each of ``d // 2`` random orthogonal planes."""
    if d < 2:
        return np.ones((1, 1))
    basis = special_ortho_group.rvs(d, random_state=rng)
    block = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, d - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return basis @ block @ basis.T


def resize_images(task: TaskDataset, side: int) -> TaskDataset:
    """Block-mean downsample square images to ``side`` x ``side``."""
    orig = int(round(np.sqrt(task.d)))
    if orig * orig != task.d:
        raise ValidationError(f"input dim {task.d} is not a square image")
    if side < 1 or orig % side:
        raise ValidationError(f"target side {side} does not divide original side {orig}")
    if side == orig:
        return task
    f = orig // side

    def shrink(x):
        return x.reshape(-1, side, f, side, f).mean(axis=(2, 4)).reshape(-1, side * side)

    return replace(task, train_x=shrink(task.train_x), test_x=shrink(task.test_x))


def _area_matrix(orig: int, side: int) -> np.ndarray:
    """(side, orig) averaging weights: fractional overlap of pixel intervals."""
    edges_out = np.linspace(0.0, orig, side + 1)
    a = np.zeros((side, orig))
    for i in range(side):
        lo, hi = edges_out[i], edges_out[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), orig)):
            a[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return a / a.sum(axis=1, keepdims=True)


def resample_images(task: TaskDataset, side: int) -> TaskDataset:
    """Area-average resampling to any smaller or equal side (block mean when it divides)."""
    orig = int(round(np.sqrt(task.d)))
    if orig * orig != task.d:
        raise ValidationError(f"input dim {task.d} is not a square image")
    if side < 1 or side > orig:
        raise ValidationError(f"cannot resample side {orig} to {side}")
    if orig % side == 0:
        return resize_images(task, side)
    a = _area_matrix(orig, side)

    def shrink(x):
        imgs = x.reshape(-1, orig, orig)
        return np.einsum("ij,njk,lk->nil", a, imgs, a).reshape(-1, side * side)

    return replace(task, train_x=shrink(task.train_x), test_x=shrink(task.test_x))


def harmonize_resolution(tasks: Sequence[TaskDataset]) -> List[TaskDataset]:
    """Resample every task to the smallest image side present."""
    target = min(int(round(np.sqrt(t.d))) for t in tasks)
    return [resample_images(t, target) for t in tasks]
