"""Synthetic benchmarks, CSV persistence and task sequences.

A benchmark world assigns each class a binary attribute row and a class
mean that mixes an attribute-driven part with a class-private part::

    mean_y = alpha * (M a_y) + (1 - alpha) * v_y

so ``alpha`` controls how much of a class's appearance its attributes can
express. Samples are ``mean_y + sigma * N(0, I)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ParseError, SchemaError, SpecError

MAX_ATTRIBUTE_REDRAWS = 1000
SPLITS = ("train", "test")


@dataclass(frozen=True)
class BenchmarkSpec:
    n_classes: int = 10
    n_attributes: int = 8
    input_dim: int = 16
    train_per_class: int = 50
    test_per_class: int = 20
    alpha: float = 0.5
    sigma: float = 0.3
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise SpecError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_attributes < 1:
            raise SpecError(f"n_attributes must be >= 1, got {self.n_attributes}")
        if self.input_dim < 1:
            raise SpecError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise SpecError("per-class train/test counts must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise SpecError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.sigma > 0:
            raise SpecError(f"sigma must be positive, got {self.sigma}")
        return self


class AttributeTable:
    """Class-to-attribute matrix; row ``y`` is the description of class ``y``."""

    def __init__(self, matrix):
        A = np.array(matrix, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
            raise SchemaError(f"attribute matrix must be 2-D and non-empty, got shape {A.shape}")
        if not np.isfinite(A).all():
            raise SchemaError("attribute matrix contains non-finite values")
        if A.min() < 0.0 or A.max() > 1.0:
            raise SchemaError("attribute values must lie in [0, 1]")
        if len(np.unique(A, axis=0)) != A.shape[0]:
            raise SchemaError("attribute rows are not pairwise distinct; some classes are indistinguishable")
        A.setflags(write=False)
        self.matrix = A

    @classmethod
    def identity(cls, n_classes: int) -> "AttributeTable":
        return cls(np.eye(n_classes))

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_identity(self) -> bool:
        """True when descriptions are bare one-hot labels (no semantic content)."""
        return self.matrix.shape[0] == self.matrix.shape[1] and np.array_equal(self.matrix, np.eye(self.n_classes))

    def describe(self, y) -> np.ndarray:
        return describe(self, y)

    def __eq__(self, other):
        return isinstance(other, AttributeTable) and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        return f"AttributeTable(n_classes={self.n_classes}, n_attributes={self.n_attributes})"


def describe(table: AttributeTable, y) -> np.ndarray:
    """Attribute vector(s) of class ``y``: the product ``A^T onehot(y)``."""
    idx = np.asarray(y, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.n_classes):
        raise IndexError(f"class index out of range [0, {table.n_classes}): {y}")
    return table.matrix[idx].copy()


@dataclass
class Dataset:
    """Flat labeled samples; ``split`` holds 'train'/'test', ``task`` the task index."""

    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    task: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        self.task = np.asarray(self.task, dtype=np.int64)
        n = self.X.shape[0]
        if self.X.ndim != 2 or not (len(self.y) == len(self.split) == len(self.task) == n):
            raise SchemaError("dataset columns have inconsistent lengths")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], self.y[mask], self.split[mask], self.task[mask])


@dataclass
class Task:
    index: int
    classes: np.ndarray
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


@dataclass
class TaskSequence:
    tasks: List[Task]
    n_classes: int
    class_to_task: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, k) -> Task:
        return self.tasks[k]

    def seen_classes(self, t: int) -> np.ndarray:
        """Classes of tasks ``0..t`` (the cumulative set up to time ``t + 1``)."""
        return np.concatenate([task.classes for task in self.tasks[: t + 1]])

    def test_set(self) -> Tuple[np.ndarray, np.ndarray]:
        """Union of all task test sets, for task-agnostic evaluation."""
        return (np.concatenate([task.X_test for task in self.tasks]),
                np.concatenate([task.y_test for task in self.tasks]))

    def merged(self) -> "TaskSequence":
        """All tasks folded into one (the joint-training setting)."""
        classes = np.concatenate([task.classes for task in self.tasks])
        joint = Task(0, np.sort(classes),
                     np.concatenate([t.X_train for t in self.tasks]), np.concatenate([t.y_train for t in self.tasks]),
                     np.concatenate([t.X_test for t in self.tasks]), np.concatenate([t.y_test for t in self.tasks]))
        return TaskSequence([joint], self.n_classes, np.zeros(self.n_classes, dtype=np.int64))

    def to_dataset(self) -> Dataset:
        Xs, ys, splits, tasks = [], [], [], []
        for task in self.tasks:
            for split, X, y in (("train", task.X_train, task.y_train), ("test", task.X_test, task.y_test)):
                Xs.append(X)
                ys.append(y)
                splits.append(np.full(len(y), split))
                tasks.append(np.full(len(y), task.index))
        return Dataset(np.concatenate(Xs), np.concatenate(ys), np.concatenate(splits), np.concatenate(tasks))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _draw_attributes(spec: BenchmarkSpec, rng: np.random.Generator) -> np.ndarray:
    C, Q = spec.n_classes, spec.n_attributes
    for _ in range(MAX_ATTRIBUTE_REDRAWS):
        A = (rng.random((C, Q)) < 0.5).astype(np.float64)
        if len(np.unique(A, axis=0)) == C:
            return A
    raise SpecError(
        f"could not draw {C} distinct attribute rows with {Q} binary attributes after "
        f"{MAX_ATTRIBUTE_REDRAWS} tries; increase n_attributes (2**{Q} = {2 ** Q} possible rows)")


def _rms_normalize(M: np.ndarray) -> np.ndarray:
    rms = math.sqrt(float(np.mean(M * M)))
    return M / rms if rms > 0 else M


def _draw_world(spec: BenchmarkSpec, rng: np.random.Generator):
    A = _draw_attributes(spec, rng)
    projection = rng.standard_normal((spec.n_attributes, spec.input_dim))
    private = rng.standard_normal((spec.n_classes, spec.input_dim))
    attr_part = _rms_normalize(A @ projection)
    means = spec.alpha * attr_part + (1.0 - spec.alpha) * _rms_normalize(private)
    return A, means


def benchmark_class_means(spec: BenchmarkSpec) -> np.ndarray:
    """Noise-free class means of the world ``generate_benchmark(spec)`` samples from."""
    spec.validate()
    return _draw_world(spec, np.random.default_rng(spec.seed))[1]


def generate_benchmark(spec: BenchmarkSpec) -> Tuple[Dataset, AttributeTable]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    A, means = _draw_world(spec, rng)
    per_class = spec.train_per_class + spec.test_per_class
    n = spec.n_classes * per_class
    y = np.repeat(np.arange(spec.n_classes), per_class)
    X = means[y] + spec.sigma * rng.standard_normal((n, spec.input_dim))
    split = np.tile(np.array(["train"] * spec.train_per_class + ["test"] * spec.test_per_class), spec.n_classes)
    return Dataset(X, y, split, np.zeros(n, dtype=np.int64)), AttributeTable(A)


# ---------------------------------------------------------------------------
# task splits
# ---------------------------------------------------------------------------

def _build_sequence(dataset: Dataset, class_to_task: np.ndarray, n_tasks: int) -> TaskSequence:
    tasks = []
    train = dataset.split == "train"
    sample_task = class_to_task[dataset.y]
    for k in range(n_tasks):
        in_task = sample_task == k
        tr, te = in_task & train, in_task & ~train
        tasks.append(Task(k, np.flatnonzero(class_to_task == k),
                          dataset.X[tr], dataset.y[tr], dataset.X[te], dataset.y[te]))
    return TaskSequence(tasks, len(class_to_task), class_to_task)


def split_tasks(dataset: Dataset, class_splits: Sequence[int], shuffle: bool = False,
                seed: Optional[int] = None) -> TaskSequence:
    """Partition classes into consecutive tasks of the given sizes.

    Classes go to tasks in ascending index order unless ``shuffle`` is set,
    in which case a ``seed``-determined permutation is used.
    """
    counts = [int(c) for c in class_splits]
    C = dataset.n_classes
    if not counts or any(c < 1 for c in counts):
        raise SpecError(f"class splits must be positive counts, got {list(class_splits)}")
    if sum(counts) != C:
        raise SpecError(f"class splits {counts} sum to {sum(counts)}, dataset has {C} classes")
    order = np.arange(C)
    if shuffle:
        order = np.random.default_rng(seed).permutation(C)
    class_to_task = np.empty(C, dtype=np.int64)
    start = 0
    for k, c in enumerate(counts):
        class_to_task[order[start:start + c]] = k
        start += c
    return _build_sequence(dataset, class_to_task, len(counts))


def tasks_from_column(dataset: Dataset) -> TaskSequence:
    """Task sequence taken from the dataset's own ``task`` column."""
    C = dataset.n_classes
    class_to_task = np.full(C, -1, dtype=np.int64)
    for c in range(C):
        ts = np.unique(dataset.task[dataset.y == c])
        if len(ts) != 1:
            raise SchemaError(f"class {c} appears in tasks {ts.tolist()}; each class needs exactly one task")
        class_to_task[c] = ts[0]
    n_tasks = int(class_to_task.max()) + 1
    missing = sorted(set(range(n_tasks)) - set(class_to_task.tolist()))
    if missing:
        raise SchemaError(f"task ids are not dense; no classes in tasks {missing}")
    return _build_sequence(dataset, class_to_task, n_tasks)


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(dataset: Dataset, features_path, table: Optional[AttributeTable] = None,
                 attributes_path=None) -> None:
    D = dataset.input_dim
    with open(features_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "task", "y"] + [f"x_{i}" for i in range(D)])
        for s, t, y, x in zip(dataset.split, dataset.task, dataset.y, dataset.X):
            w.writerow([s, int(t), int(y)] + [_fmt(v) for v in x])
    if table is not None:
        if attributes_path is None:
            raise ValueError("attributes_path is required when a table is given")
        save_attributes(table, attributes_path)


def save_attributes(table: AttributeTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y"] + [f"a_{i}" for i in range(table.n_attributes)])
        for y, row in enumerate(table.matrix):
            w.writerow([y] + [_fmt(v) for v in row])


def _parse_int(text, path, line, what):
    try:
        v = int(text)
    except ValueError:
        raise ParseError(f"{what} is not an integer: {text!r}", path, line) from None
    if v < 0:
        raise ParseError(f"{what} must be nonnegative, got {v}", path, line)
    return v


def _parse_floats(cells, path, line):
    try:
        return [float(c) for c in cells]
    except ValueError as exc:
        raise ParseError(f"bad number ({exc})", path, line) from None


def _read_rows(path, prefix: List[str], stem: str):
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, expected a header")
        width = len(header) - len(prefix)
        expected = prefix + [f"{stem}_{i}" for i in range(width)]
        if width < 1 or header != expected:
            raise ParseError(f"header must be {','.join(prefix)},{stem}_0,...; got {','.join(header)}", path, 1)
        rows = []
        for cells in reader:
            line = reader.line_num
            if not cells:
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(cells)}", path, line)
            rows.append((line, cells))
    if not rows:
        raise SchemaError(f"{path}: no samples")
    return rows, width


def load_attributes(path) -> AttributeTable:
    rows, _ = _read_rows(path, ["y"], "a")
    by_class = {}
    for line, cells in rows:
        y = _parse_int(cells[0], path, line, "class id")
        if y in by_class:
            raise SchemaError(f"{path}:{line}: duplicate class id {y}")
        by_class[y] = _parse_floats(cells[1:], path, line)
    if sorted(by_class) != list(range(len(by_class))):
        raise SchemaError(f"{path}: class ids are not dense 0..{len(by_class) - 1}")
    return AttributeTable([by_class[y] for y in range(len(by_class))])


def load_dataset(features_path, attributes_path=None) -> Tuple[Dataset, Optional[AttributeTable]]:
    """Read a features CSV and (optionally) its attributes CSV, cross-checking both."""
    rows, D = _read_rows(features_path, ["split", "task", "y"], "x")
    n = len(rows)
    X = np.empty((n, D))
    y = np.empty(n, dtype=np.int64)
    task = np.empty(n, dtype=np.int64)
    split = []
    for i, (line, cells) in enumerate(rows):
        if cells[0] not in SPLITS:
            raise ParseError(f"split must be train or test, got {cells[0]!r}", features_path, line)
        split.append(cells[0])
        task[i] = _parse_int(cells[1], features_path, line, "task")
        y[i] = _parse_int(cells[2], features_path, line, "class id")
        X[i] = _parse_floats(cells[3:], features_path, line)
    if not np.isfinite(X).all():
        raise SchemaError(f"{features_path}: non-finite feature values")
    classes = np.unique(y)
    if not np.array_equal(classes, np.arange(len(classes))):
        raise SchemaError(f"{features_path}: class ids are not dense 0..{len(classes) - 1}")
    dataset = Dataset(X, y, np.array(split), task)
    table = None
    if attributes_path is not None:
        table = load_attributes(attributes_path)
        if table.n_classes != len(classes):
            raise SchemaError(f"{attributes_path}: {table.n_classes} attribute rows for {len(classes)} classes")
    return dataset, table
