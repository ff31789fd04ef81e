"""Full continual runs: one estimator walked through a task sequence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .data import AttributeTable, TaskSequence
from .estimator import BImagClassifier
from .metrics import evaluate_step, mean_autac
from .models import ModelBundle
from .training import TrainingConfig, Variant


class StageError(RuntimeError):
    """A training stage failed; the message carries the variant and time step."""


@dataclass
class StepRecord:
    t: int
    acc_per_task: List[float]
    acc_a: float
    acc_b: float
    harmonic_mean: float
    autac: float
    curve: List[dict]
    scores: Optional[np.ndarray] = field(default=None, repr=False)
    bundle: Optional[ModelBundle] = field(default=None, repr=False)

    def payload(self) -> dict:
        return {"t": self.t, "acc_per_task": self.acc_per_task, "acc_a": self.acc_a, "acc_b": self.acc_b,
                "harmonic_mean": self.harmonic_mean, "autac": self.autac,
                "curve": [{"gamma": _gamma_out(p["gamma"]), "acc_a": p["acc_a"], "acc_b": p["acc_b"]}
                          for p in self.curve]}


def _gamma_out(g: float):
    # JSON has no infinities; the two sweep limits are written as strings
    if g == float("inf"):
        return "inf"
    if g == float("-inf"):
        return "-inf"
    return g


@dataclass
class RunRecord:
    variant: str
    seed: int
    config_echo: dict
    steps: List[StepRecord] = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)

    @property
    def mean_autac(self) -> float:
        return mean_autac([s.autac for s in self.steps])

    def payload(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "config_echo": self.config_echo,
                "steps": [s.payload() for s in self.steps], "mean_autac": self.mean_autac}

    def to_json(self) -> str:
        return json.dumps(self.payload(), indent=2, sort_keys=True) + "\n"


def run_bcl(variant, sequence: TaskSequence, table: Optional[AttributeTable], cfg: TrainingConfig,
            keep_scores: bool = False, keep_models: bool = False, config_echo: Optional[dict] = None) -> RunRecord:
    """Train task after task and evaluate on the union of all test sets after each.

    ``joint_training`` folds every task into one and evaluates once.
    """
    variant = Variant(variant)
    cfg.validate()
    est = BImagClassifier.from_config(variant, cfg, table, n_classes=sequence.n_classes)
    train_seq = sequence.merged() if variant is Variant.JOINT else sequence
    X_test, y_test = sequence.test_set()
    echo = {"variant": variant.value, "train": cfg.to_dict()} if config_echo is None else config_echo
    record = RunRecord(variant.value, cfg.seed, echo)
    for k, task in enumerate(train_seq):
        t = k + 1
        try:
            est.partial_fit(task.X_train, task.y_train)
        except Exception as exc:
            raise StageError(f"{variant.value} seed={cfg.seed} t={t}: {type(exc).__name__}: {exc}") from exc
        scores = est.decision_function(X_test)
        eval_t = len(sequence) - 1 if variant is Variant.JOINT else k
        metrics = evaluate_step(scores, y_test, sequence.class_to_task, eval_t)
        record.steps.append(StepRecord(t=t, scores=scores if keep_scores else None,
                                       bundle=est.bundle_ if keep_models else None, **metrics))
    record.history = est.history_
    return record
