"""Accuracy, micro/macro F1 and cross-episode confidence intervals."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractViolation

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["algorithm", "encoder", "attention", "way", "shot", "metric", "mean", "ci95", "episodes", "seed"]


def accuracy(predictions: Sequence[int], gold: Sequence[int]) -> float:
    p = np.asarray(predictions)
    g = np.asarray(gold)
    if p.shape != g.shape:
        raise ContractViolation(f"{p.size} predictions for {g.size} gold labels")
    if p.size == 0:
        raise ContractViolation("accuracy of an empty set")
    return float(np.mean(p == g))


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        self.tp = np.asarray(self.tp, dtype=np.int64)
        self.fp = np.asarray(self.fp, dtype=np.int64)
        self.fn = np.asarray(self.fn, dtype=np.int64)
        if min(self.tp.min(initial=0), self.fp.min(initial=0), self.fn.min(initial=0)) < 0:
            raise ContractViolation("confusion counts must be non-negative")

    @property
    def n_labels(self) -> int:
        return self.tp.size

    @classmethod
    def from_sets(cls, predicted: Iterable[set], gold: Iterable[set], n_labels: int) -> "ConfusionCounts":
        tp = np.zeros(n_labels, dtype=np.int64)
        fp = np.zeros(n_labels, dtype=np.int64)
        fn = np.zeros(n_labels, dtype=np.int64)
        for p, g in zip(predicted, gold):
            for j in p:
                if j in g:
                    tp[j] += 1
                else:
                    fp[j] += 1
            for j in g:
                if j not in p:
                    fn[j] += 1
        return cls(tp, fp, fn)

    @classmethod
    def from_binary(cls, predicted: np.ndarray, gold: np.ndarray) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool)
        g = np.asarray(gold, dtype=bool)
        return cls((p & g).sum(0), (p & ~g).sum(0), (~p & g).sum(0))

    @classmethod
    def from_single(cls, predictions: Sequence[int], gold: Sequence[int], n_labels: int) -> "ConfusionCounts":
        return cls.from_sets(({int(p)} for p in predictions), ({int(g)} for g in gold), n_labels)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def micro_f1(counts: ConfusionCounts) -> float:
    if counts.n_labels == 0:
        raise ContractViolation("at least one label is required")
    return _f1(int(counts.tp.sum()), int(counts.fp.sum()), int(counts.fn.sum()))


def macro_f1(counts: ConfusionCounts) -> float:
    """Mean per-label F1; a label with 0/0 scores 0.

    The mean is taken in exact rational arithmetic and rounded once, so the
    result does not depend on label order.
    """
    if counts.n_labels == 0:
        raise ContractViolation("at least one label is required")
    total = Fraction(0)
    for tp, fp, fn in zip(counts.tp.tolist(), counts.fp.tolist(), counts.fn.tolist()):
        denom = 2 * tp + fp + fn
        if denom:
            total += Fraction(2 * tp, denom)
    return float(total / counts.n_labels)


@dataclass
class AggregateResult:
    metric: str
    mean: float
    ci95: float  # half-width
    n: int

    @property
    def low(self) -> float:
        return self.mean - self.ci95

    @property
    def high(self) -> float:
        return self.mean + self.ci95


def aggregate(values: Sequence[float], metric: str = "") -> AggregateResult:
    """Mean with a normal-approximation 95% half-width, 1.96 * sd / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        log.warning("aggregating zero values for %s", metric or "metric")
        return AggregateResult(metric, float("nan"), math.inf, 0)
    if v.size < 2:
        log.warning("a confidence interval needs at least 2 values; reporting infinity")
        return AggregateResult(metric, float(v.mean()), math.inf, int(v.size))
    sd = float(np.std(v, ddof=1))
    return AggregateResult(metric, float(v.mean()), 1.96 * sd / math.sqrt(v.size), int(v.size))


def write_results_csv(path, rows: Sequence[dict], header_line: str | None = None) -> None:
    """Results table; ``header_line`` (e.g. a timestamp) is written as a leading comment."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_line:
            fh.write(f"# {header_line}\n")
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for k in ("mean", "ci95"):
                if isinstance(out.get(k), float):
                    out[k] = f"{out[k]:.6f}"
            writer.writerow(out)
