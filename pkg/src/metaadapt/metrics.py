"""Confusion counts, balanced accuracy / accuracy / F1, and CSV reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        return cls(
            tp=int(np.sum((y_true == 1) & (y_pred == 1))),
            fp=int(np.sum((y_true == 0) & (y_pred == 1))),
            tn=int(np.sum((y_true == 0) & (y_pred == 0))),
            fn=int(np.sum((y_true == 1) & (y_pred == 0))),
        )


@dataclass(frozen=True)
class Metrics:
    ba: float
    acc: float
    f1: float
    n: int


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    # a class absent from the data contributes a neutral 0.5
    sens = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.5
    spec = cm.tn / (cm.tn + cm.fp) if cm.tn + cm.fp else 0.5
    return 0.5 * (sens + spec)


def accuracy(cm: ConfusionMatrix) -> float:
    return (cm.tp + cm.tn) / cm.total if cm.total else 0.0


def f1(cm: ConfusionMatrix) -> float:
    denom = 2 * cm.tp + cm.fp + cm.fn
    return 2 * cm.tp / denom if denom else 0.0


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    return Metrics(ba=balanced_accuracy(cm), acc=accuracy(cm), f1=f1(cm), n=cm.total)


def confusion(params, features: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    from .model import predict_labels

    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return ConfusionMatrix.from_labels(labels, predict_labels(params, features))


def evaluate(params, features: np.ndarray, labels: np.ndarray) -> Metrics:
    return metrics_from_confusion(confusion(params, features, labels))


HISTORY_HEADER = "iter,ba,acc,f1,n"


def _row(it, m: Metrics) -> str:
    return f"{it},{m.ba:.6f},{m.acc:.6f},{m.f1:.6f},{m.n}"


def report_csv(history, path) -> None:
    """Write ``(iteration, Metrics)`` pairs, one row each."""
    lines = [HISTORY_HEADER] + [_row(it, m) for it, m in history]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> list[tuple[int, Metrics]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != HISTORY_HEADER:
            raise ValueError(f"unexpected header {header!r}")
        for line in fh:
            it, ba, acc, f1_, n = line.strip().split(",")
            out.append((int(it), Metrics(float(ba), float(acc), float(f1_), int(n))))
    return out
