"""Task-agnostic evaluation: per-class accuracy, harmonic mean and AUTAC.

AUTAC (area under the task-accuracy curve) sweeps a calibration offset
``gamma`` added to the scores of one class group (B). At ``gamma = -inf``
group B is never predicted, at ``+inf`` group A never is. Each offset gives
a point (mean per-class accuracy on A, mean per-class accuracy on B); the
area under the resulting curve is integrated with the trapezoidal rule.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import MetricError


def per_class_accuracy(y_true, y_pred, classes) -> Tuple[np.ndarray, float]:
    """Recall of every class in ``classes`` and their unweighted mean."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise MetricError(f"{len(y_true)} labels but {len(y_pred)} predictions")
    if len(classes) == 0:
        raise MetricError("empty class subset")
    recalls = np.empty(len(classes))
    for i, c in enumerate(classes):
        mask = y_true == c
        n = mask.sum()
        if n == 0:
            raise MetricError(f"class {c} has no test samples")
        recalls[i] = np.count_nonzero(y_pred[mask] == c) / n
    return recalls, float(recalls.mean())


def harmonic_mean(acc_a: float, acc_b: float) -> float:
    if acc_a < 0 or acc_b < 0:
        raise MetricError(f"accuracies must be nonnegative, got {acc_a}, {acc_b}")
    if acc_a + acc_b == 0:
        return 0.0
    return 2.0 * acc_a * acc_b / (acc_a + acc_b)


def mean_autac(values: Sequence[float]) -> float:
    values = list(values)
    if not values:
        raise MetricError("mean AUTAC needs at least one value")
    return math.fsum(values) / len(values)


@dataclass
class AutacCurve:
    area: float
    gammas: np.ndarray
    acc_a: np.ndarray
    acc_b: np.ndarray

    def points(self) -> List[dict]:
        return [{"gamma": float(g), "acc_a": float(a), "acc_b": float(b)}
                for g, a, b in zip(self.gammas, self.acc_a, self.acc_b)]


def _groups(scores, labels, group_a, group_b):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != len(labels):
        raise MetricError(f"score matrix {scores.shape} does not match {len(labels)} labels")
    if not np.isfinite(scores).all():
        raise MetricError("score matrix contains non-finite values")
    a = np.asarray(sorted(set(int(c) for c in group_a)), dtype=np.int64)
    b = np.asarray(sorted(set(int(c) for c in group_b)), dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("both class groups must be non-empty")
    if np.intersect1d(a, b).size:
        raise MetricError("class groups overlap")
    present = np.unique(labels)
    outside = np.setdiff1d(present, np.concatenate([a, b]))
    if outside.size:
        raise MetricError(f"labels {outside.tolist()} belong to neither group")
    return scores, labels, a, b


def autac_grid(scores, grid_size: int = 201) -> np.ndarray:
    """Offsets spanning [-R, R] (R = score range) flanked by the two limits."""
    scores = np.asarray(scores, dtype=np.float64)
    R = float(scores.max() - scores.min())
    inner = np.linspace(-R, R, grid_size) if grid_size > 1 else np.zeros(1)
    return np.concatenate([[-np.inf], inner, [np.inf]])


def calibrated_predictions(scores, group_a, group_b, gamma: float) -> np.ndarray:
    """Predictions after adding ``gamma`` to every group-B score.

    Ties go to the lowest class index, as with a plain argmax.
    """
    a = np.asarray(group_a, dtype=np.int64)
    b = np.asarray(group_b, dtype=np.int64)
    ia = np.argmax(scores[:, a], axis=1)
    ib = np.argmax(scores[:, b], axis=1)
    best_a, best_b = a[ia], b[ib]
    rows = np.arange(len(scores))
    top_a = scores[rows, best_a]
    top_b = scores[rows, best_b]
    if gamma == -np.inf:
        return best_a
    if gamma == np.inf:
        return best_b
    shifted = top_b + gamma
    take_b = (shifted > top_a) | ((shifted == top_a) & (best_b < best_a))
    return np.where(take_b, best_b, best_a)


def autac(scores, labels, group_a, group_b, grid_size: int = 201,
          gammas: Optional[Sequence[float]] = None) -> AutacCurve:
    """Area under the (acc_A, acc_B) curve traced by the calibration sweep.

    ``gammas`` replaces the default grid; the +-inf limits are always added.
    """
    scores, labels, a, b = _groups(scores, labels, group_a, group_b)
    if gammas is None:
        g = autac_grid(scores, grid_size)
    else:
        g = np.unique(np.concatenate([[-np.inf], np.asarray(gammas, dtype=np.float64), [np.inf]]))
    a_present = a[np.isin(a, labels)]
    b_present = b[np.isin(b, labels)]
    totals = np.bincount(labels, minlength=scores.shape[1]).astype(np.float64)
    acc_a = np.zeros(len(g))
    acc_b = np.zeros(len(g))
    for i, gamma in enumerate(g):
        pred = calibrated_predictions(scores, a, b, gamma)
        hits = np.bincount(labels[pred == labels], minlength=scores.shape[1])
        recall = hits / np.maximum(totals, 1.0)
        if len(a_present):
            acc_a[i] = recall[a_present].mean()
        if len(b_present):
            acc_b[i] = recall[b_present].mean()
    # x ascending; among equal x the larger-gamma point (larger y) comes first
    order = np.lexsort((-acc_b, acc_a))
    x, y = acc_a[order], acc_b[order]
    area = float(np.sum(np.diff(x) * (y[:-1] + y[1:]) * 0.5))
    return AutacCurve(area, g, acc_a, acc_b)


def task_groups(class_to_task, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Class groups compared by AUTAC after training task ``t`` (0-based).

    Two tasks: task A against task B at every step. More tasks: the most
    recently trained task against all other classes.
    """
    class_to_task = np.asarray(class_to_task)
    n_tasks = int(class_to_task.max()) + 1
    if n_tasks < 2:
        raise MetricError("AUTAC needs at least two tasks")
    if n_tasks == 2:
        return np.flatnonzero(class_to_task == 0), np.flatnonzero(class_to_task == 1)
    recent = min(t, n_tasks - 1)
    return np.flatnonzero(class_to_task == recent), np.flatnonzero(class_to_task != recent)


def evaluate_step(scores, labels, class_to_task, t: int, grid_size: int = 201) -> dict:
    """Metrics of one time step from a task-agnostic score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    class_to_task = np.asarray(class_to_task)
    if scores.shape[1] != len(class_to_task):
        raise MetricError(f"scores span {scores.shape[1]} classes, universe has {len(class_to_task)}")
    pred = np.argmax(scores, axis=1)
    n_tasks = int(class_to_task.max()) + 1
    acc_per_task = [per_class_accuracy(labels, pred, np.flatnonzero(class_to_task == k))[1]
                    for k in range(n_tasks)]
    group_a, group_b = task_groups(class_to_task, t)
    acc_a = per_class_accuracy(labels, pred, group_a)[1]
    acc_b = per_class_accuracy(labels, pred, group_b)[1]
    curve = autac(scores, labels, group_a, group_b, grid_size)
    return {"acc_per_task": acc_per_task, "acc_a": acc_a, "acc_b": acc_b,
            "harmonic_mean": harmonic_mean(acc_a, acc_b), "autac": curve.area, "curve": curve.points()}


def _fmt_gamma(g: float) -> str:
    if math.isinf(g):
        return "inf" if g > 0 else "-inf"
    return repr(float(g))


def write_curve_csv(path, points: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "acc_a", "acc_b"])
        for p in points:
            w.writerow([_fmt_gamma(float(p["gamma"])), repr(float(p["acc_a"])), repr(float(p["acc_b"]))])
