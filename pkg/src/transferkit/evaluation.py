"""Confusion matrices and the per-class / macro metric stack.

Metrics are computed with ``fractions.Fraction`` so results derived from
integer counts are exact; conversion to float happens only on output.
Matrix orientation is ``counts[actual][predicted]``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError
from .train import EpochRecord

CURVE_COLUMNS = ("epoch", "train_acc", "val_acc", "train_ce", "val_ce")
METRIC_FIELDS = ("precision", "recall", "accuracy", "f1")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise DataError(f"confusion matrix must be square k x k, got shape {c.shape}")
        if (c < 0).any():
            raise DataError("confusion matrix entries must be non-negative")
        c.setflags(write=False)
        names = tuple(self.class_names) or tuple(str(i) for i in range(c.shape[0]))
        if len(names) != c.shape[0]:
            raise DataError(f"{len(names)} class names for a {c.shape[0]}-class matrix")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "class_names", names)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise DataError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def pairs(self) -> list[tuple[int, int]]:
        """Expand back into (actual, predicted) pairs, row-major order."""
        return [(a, p) for a in range(self.k) for p in range(self.k) for _ in range(int(self.counts[a, p]))]


def confusion_from_predictions(pairs: Iterable[tuple[int, int]], k: int, class_names=()) -> ConfusionMatrix:
    counts = np.zeros((k, k), dtype=np.int64)
    for a, p in pairs:
        if not (0 <= a < k and 0 <= p < k):
            raise DataError(f"label pair ({a}, {p}) outside [0, {k})")
        counts[a, p] += 1
    return ConfusionMatrix(counts, class_names)


@dataclass(frozen=True)
class ClassMetrics:
    precision: Fraction | float
    recall: Fraction | float
    accuracy: Fraction | float
    f1: Fraction | float


def _ratio(num, den) -> Fraction:
    # 0/0 is reported as 0
    return Fraction(num, den) if den else Fraction(0)


def per_class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    total = cm.total
    if total == 0:
        raise UsageError("confusion matrix is empty; no metrics defined")
    c = cm.counts
    out = []
    for i in range(cm.k):
        tp = int(c[i, i])
        fn = int(c[i].sum()) - tp
        fp = int(c[:, i].sum()) - tp
        tn = total - tp - fp - fn
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else Fraction(0)
        out.append(ClassMetrics(precision, recall, Fraction(tp + tn, total), f1))
    return out


def macro_average(per_class: Sequence[ClassMetrics]) -> ClassMetrics:
    if not per_class:
        raise UsageError("macro average of an empty list")
    n = len(per_class)
    return ClassMetrics(*(sum((getattr(m, f) for m in per_class), Fraction(0)) / n for f in METRIC_FIELDS))


@dataclass(frozen=True)
class MetricsReport:
    class_names: tuple
    per_class: tuple
    macro: ClassMetrics
    total_examples: int


def build_report(cm: ConfusionMatrix) -> MetricsReport:
    per = per_class_metrics(cm)
    return MetricsReport(cm.class_names, tuple(per), macro_average(per), cm.total)


# --------------------------------------------------------------------------
# rendering


def _fmt(v) -> str:
    return f"{float(v):.6f}"


def _metrics_json(m: ClassMetrics) -> str:
    return ", ".join(f'"{f}": {_fmt(getattr(m, f))}' for f in METRIC_FIELDS)


def report_json(report: MetricsReport) -> str:
    rows = [
        f'    {{"name": {json.dumps(name)}, {_metrics_json(m)}}}'
        for name, m in zip(report.class_names, report.per_class)
    ]
    return (
        "{\n"
        '  "classes": [\n' + ",\n".join(rows) + "\n  ],\n"
        f'  "macro": {{{_metrics_json(report.macro)}}},\n'
        f'  "total": {int(report.total_examples)}\n'
        "}\n"
    )


def report_table(report: MetricsReport) -> str:
    labels = list(report.class_names) + ["Macro Average"]
    width = max(len("class"), *(len(l) for l in labels))
    header = f"{'class':<{width}}  " + "  ".join(f"{f:>9}" for f in METRIC_FIELDS)
    lines = [header, "-" * len(header)]
    for label, m in zip(labels, list(report.per_class) + [report.macro]):
        lines.append(f"{label:<{width}}  " + "  ".join(f"{_fmt(getattr(m, f)):>9}" for f in METRIC_FIELDS))
    lines.append(f"total examples: {report.total_examples}")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, format: str = "json") -> str:
    if format == "json":
        return report_json(report)
    if format == "table":
        return report_table(report)
    raise UsageError(f"unknown report format {format!r}")


def parse_report(text: str) -> MetricsReport:
    try:
        doc = json.loads(text)
        names = tuple(c["name"] for c in doc["classes"])
        per = tuple(ClassMetrics(*(float(c[f]) for f in METRIC_FIELDS)) for c in doc["classes"])
        macro = ClassMetrics(*(float(doc["macro"][f]) for f in METRIC_FIELDS))
        return MetricsReport(names, per, macro, int(doc["total"]))
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"malformed report JSON: {e}") from None


# --------------------------------------------------------------------------
# confusion-matrix CSV


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cm.class_names)
    for name, row in zip(cm.class_names, cm.counts):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def parse_confusion_csv(text: str) -> ConfusionMatrix:
    """Header of class names (optionally led by a corner cell), then k rows
    ``actual_name,c1,...,ck``."""
    rows = [r for r in csv.reader(io.StringIO(text)) if any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise DataError("confusion CSV needs a header and at least one row")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    k = len(body)
    if len(header) == k + 1:
        header = header[1:]
    if len(header) != k:
        raise DataError(f"header has {len(header)} class names but there are {k} rows")
    counts = []
    for r in body:
        if len(r) != k + 1:
            raise DataError(f"row {r[0]!r} has {len(r) - 1} counts, expected {k}")
        if r[0].strip() != header[len(counts)]:
            raise DataError(f"row {len(counts)} is {r[0].strip()!r}, header says {header[len(counts)]!r}")
        try:
            counts.append([int(v) for v in r[1:]])
        except ValueError as e:
            raise DataError(f"non-integer count in row {r[0]!r}: {e}") from None
    return ConfusionMatrix(np.array(counts), tuple(header))


# --------------------------------------------------------------------------
# training curves


def emit_curves_csv(log) -> str:
    """``epoch,train_acc,val_acc,train_ce,val_ce`` with 6 fractional digits."""
    if not log:
        raise UsageError("epoch log is empty")
    lines = [",".join(CURVE_COLUMNS)]
    for r in log:
        lines.append(f"{int(r.epoch)},{r.train_acc:.6f},{r.val_acc:.6f},{r.train_ce:.6f},{r.val_ce:.6f}")
    return "\n".join(lines) + "\n"


def parse_curves_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CURVE_COLUMNS:
        raise DataError(f"curves CSV header must be {','.join(CURVE_COLUMNS)}")
    return [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in reader if r]
