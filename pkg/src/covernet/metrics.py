"""Top-k accuracy, per-genre reports, confusion matrices, chance multiples."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, LabelError, ShapeError


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    class_names: tuple

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        n, c = self.probs.shape
        if self.labels.shape != (n,):
            raise ShapeError(f"{self.labels.shape[0]} labels for {n} rows", axis="rows")
        if c != len(self.class_names):
            raise ShapeError(f"{c} columns but {len(self.class_names)} class names", axis="classes")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= c))
        if bad.size:
            raise LabelError(f"row {bad[0]}: label {self.labels[bad[0]]} out of range", row=int(bad[0]))
        if n and np.max(np.abs(self.probs.sum(axis=1, dtype=np.float64) - 1.0)) > 1e-6:
            raise InvalidParameterError("probability rows must sum to 1")

    @property
    def class_count(self):
        return len(self.class_names)


def true_class_rank(probs, labels):
    """0-based rank of each row's true class; ties go to the lower class index."""
    probs = np.asarray(probs)
    rows = np.arange(probs.shape[0])
    p_true = probs[rows, labels][:, None]
    cols = np.arange(probs.shape[1])[None, :]
    ahead = (probs > p_true) | ((probs == p_true) & (cols < np.asarray(labels)[:, None]))
    return ahead.sum(axis=1)


def _check_k(k, classes):
    if not 1 <= k <= classes:
        raise InvalidParameterError(f"k must be in [1, {classes}], got {k}")


def topk_accuracy(preds: PredictionSet, k: int) -> float:
    _check_k(k, preds.class_count)
    if preds.labels.size == 0:
        return float("nan")
    return float(np.mean(true_class_rank(preds.probs, preds.labels) < k))


def top_k_classes(probs_row, k):
    """Indices of the k most probable classes, ties by lower index."""
    order = np.lexsort((np.arange(len(probs_row)), -np.asarray(probs_row)))
    return order[:k]


def chance_multiple(accuracy: float, k: int, class_count: int = 30) -> float:
    return accuracy / (k / class_count)


@dataclass
class EvalReport:
    class_names: tuple
    counts: np.ndarray            # test rows per class
    per_class_top1: np.ndarray    # percent, NaN where a class has no rows
    per_class_top3: np.ndarray
    overall: dict                 # {1: acc, 2: acc, 3: acc} as fractions
    confusion: np.ndarray         # rows true class, columns top-1 prediction
    chance_multiples: dict

    def present(self, c):
        return self.counts[c] > 0


def per_class_report(preds: PredictionSet, ks=(1, 2, 3)) -> EvalReport:
    n = preds.labels.size
    if n == 0:
        raise InvalidParameterError("empty prediction set")
    c = preds.class_count
    ranks = true_class_rank(preds.probs, preds.labels)
    top1 = np.argmax(preds.probs, axis=1)  # first maximum = lowest index on ties
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (preds.labels, top1), 1)
    counts = np.bincount(preds.labels, minlength=c)
    hit1 = np.bincount(preds.labels, weights=(ranks < 1), minlength=c)
    k3 = min(3, c)
    hit3 = np.bincount(preds.labels, weights=(ranks < k3), minlength=c)
    with np.errstate(invalid="ignore", divide="ignore"):
        pc1 = np.where(counts > 0, 100.0 * hit1 / counts, np.nan)
        pc3 = np.where(counts > 0, 100.0 * hit3 / counts, np.nan)
    overall = {k: float(np.mean(ranks < k)) for k in ks if k <= c}
    multiples = {k: chance_multiple(acc, k, c) for k, acc in overall.items()}
    return EvalReport(preds.class_names, counts, pc1, pc3, overall, confusion, multiples)


def top_confusions(report: EvalReport, source: int):
    """Off-diagonal targets of ``source`` with nonzero counts, most frequent first."""
    row = report.confusion[source]
    pairs = [(t, int(row[t])) for t in range(len(row)) if t != source and row[t] > 0]
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _pct(x):
    return "-" if np.isnan(x) else f"{x:.1f}"


def render_table(reports: dict) -> str:
    """Genre rows with a Top 1 / Top 3 column pair per model, plus a total row.

    ``reports`` maps a model label (e.g. ``"LeNet"``) to its :class:`EvalReport`;
    all reports must share the class list.
    """
    names = list(reports)
    first = reports[names[0]]
    for r in reports.values():
        if r.class_names != first.class_names:
            raise InvalidParameterError("reports disagree on class names")
    genre_w = max(len("Genre"), len("Total Average"), *(len(n) for n in first.class_names))
    group_w = 13
    head1 = " " * genre_w + "".join(f" | {n:^{group_w}}" for n in names)
    head2 = f"{'Genre':<{genre_w}}" + "".join(f" | {'Top 1':>6} {'Top 3':>6}" for _ in names)
    rule = "-" * len(head2)
    lines = [head1, head2, rule]
    for c, genre in enumerate(first.class_names):
        cells = "".join(
            f" | {_pct(r.per_class_top1[c]):>6} {_pct(r.per_class_top3[c]):>6}" for r in reports.values()
        )
        lines.append(f"{genre:<{genre_w}}{cells}")
    lines.append(rule)
    total = "".join(
        f" | {100 * r.overall.get(1, np.nan):>6.1f} {100 * r.overall.get(3, np.nan):>6.1f}"
        for r in reports.values()
    )
    lines.append(f"{'Total Average':<{genre_w}}{total}")
    return "\n".join(lines) + "\n"


def render_summary(report: EvalReport) -> str:
    lines = []
    for k, acc in sorted(report.overall.items()):
        lines.append(
            f"Top {k}: {100 * acc:.1f}%  ({report.chance_multiples[k]:.1f}x chance)"
        )
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["classIndex", "className", "count", "top1", "top3"])
    for c, name in enumerate(report.class_names):
        t1 = "" if np.isnan(report.per_class_top1[c]) else f"{report.per_class_top1[c]:.4f}"
        t3 = "" if np.isnan(report.per_class_top3[c]) else f"{report.per_class_top3[c]:.4f}"
        w.writerow([c, name, int(report.counts[c]), t1, t3])
    return buf.getvalue().encode("utf-8")


def overall_csv(report: EvalReport) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "accuracy", "chanceMultiple"])
    for k, acc in sorted(report.overall.items()):
        w.writerow([k, f"{100 * acc:.4f}", f"{report.chance_multiples[k]:.4f}"])
    return buf.getvalue().encode("utf-8")


def confusion_csv(report: EvalReport) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\predicted", *report.class_names])
    for name, row in zip(report.class_names, report.confusion):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue().encode("utf-8")
