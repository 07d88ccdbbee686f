"""Pixel-wise confusion counts, per-class metrics, reports and error maps.

Ground-truth pixels labelled 0 (Unrecognized) are never counted. A
prediction of 0 on a counted pixel is kept in a separate ``none`` column:
it is a false negative for the ground-truth class and a false positive for
nobody.

Metrics that come out as 0/0 are stored as ``None``; reports render them as
1, the way a class absent from both ground truth and prediction is shown.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .raster import NUM_CLASSES, ClassMask, Raster

METRICS = ("accuracy", "iou", "precision", "recall")
UNDEFINED_RENDER = 1.0


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``counts[i, j]``: pixels of class ``i+1`` predicted as ``j+1``;
    ``none[i]``: pixels of class ``i+1`` predicted as Unrecognized."""

    counts: np.ndarray
    none: np.ndarray

    @classmethod
    def empty(cls, k: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), np.int64), np.zeros(k, np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total_counted(self) -> int:
        return int(self.counts.sum() + self.none.sum())

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.none, other.none))

    def __add__(self, other):
        return merge(self, other)


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, ClassMask) else np.asarray(m)


def accumulate(gt, pred, k: int = NUM_CLASSES) -> ConfusionMatrix:
    g, p = _labels(gt), _labels(pred)
    if g.shape != p.shape:
        raise ValueError(f"ground truth {g.shape} and prediction {p.shape} differ in size")
    if g.size and (g.max() > k or p.max() > k):
        raise ValueError(f"labels must lie in 0..{k}")
    counted = g != 0
    g = g[counted].astype(np.int64)
    p = p[counted].astype(np.int64)
    # column 0 of the joint table is the "predicted none" sentinel
    joint = np.bincount((g - 1) * (k + 1) + p, minlength=k * (k + 1)).reshape(k, k + 1)
    return ConfusionMatrix(np.ascontiguousarray(joint[:, 1:]), np.ascontiguousarray(joint[:, 0]))


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.k != b.k:
        raise ValueError(f"cannot merge confusion matrices of size {a.k} and {b.k}")
    return ConfusionMatrix(a.counts + b.counts, a.none + b.none)


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    percentage: float | None
    accuracy: float | None
    iou: float | None
    precision: float | None
    recall: float | None

    def rendered(self, name: str) -> float:
        v = getattr(self, name)
        return UNDEFINED_RENDER if v is None else v


def class_counts(cm: ConfusionMatrix, class_id: int) -> tuple[int, int, int, int]:
    """``(TP, FP, FN, TN)`` for class ``class_id`` (1-based) against the rest."""
    if not 1 <= class_id <= cm.k:
        raise ValueError(f"class id {class_id} outside 1..{cm.k}")
    c = class_id - 1
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c].sum() + cm.none[c]) - tp
    tn = cm.total_counted - tp - fp - fn
    return tp, fp, fn, tn


def class_metrics(cm: ConfusionMatrix, class_id: int) -> ClassMetrics:
    tp, fp, fn, tn = class_counts(cm, class_id)
    total = cm.total_counted
    pct = _ratio(100 * (tp + fn), total)
    return ClassMetrics(
        class_id,
        percentage=pct,
        accuracy=_ratio(tp + tn, total),
        iou=_ratio(tp, tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
    )


@dataclass(frozen=True)
class MetricsReport:
    image: str
    classes: tuple
    weighted: ClassMetrics

    @property
    def mean_iou(self) -> float | None:
        vals = [c.iou for c in self.classes if c.iou is not None]
        return sum(vals) / len(vals) if vals else None


def _weighted_mean(values, weights):
    pairs = [(v, w) for v, w in zip(values, weights) if v is not None]
    den = sum(w for _, w in pairs)
    if not pairs or den == 0:
        return None
    return sum(v * w for v, w in pairs) / den


def weighted_report(cm: ConfusionMatrix, image: str = "") -> MetricsReport:
    """Per-class rows plus a row weighted by ground-truth share.

    Weights are renormalised over the classes where a metric is defined.
    Pixel counts are used as weights, which is the same as percentages.
    """
    if cm.total_counted == 0:
        raise ValueError("confusion matrix is empty; nothing to report")
    classes = tuple(class_metrics(cm, c) for c in range(1, cm.k + 1))
    weights = [int(cm.counts[c].sum() + cm.none[c]) for c in range(cm.k)]
    weighted = ClassMetrics(0, 100.0, *(_weighted_mean([getattr(m, name) for m in classes], weights)
                                        for name in METRICS))
    return MetricsReport(image, classes, weighted)


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def aggregate_images(reports, image: str = "mean") -> MetricsReport:
    """Unweighted per-image mean of every metric; undefined entries skipped."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    k = len(reports[0].classes)
    if any(len(r.classes) != k for r in reports):
        raise ValueError("reports disagree on the number of classes")

    def mean_row(rows, class_id):
        return ClassMetrics(class_id, *(_mean_defined([getattr(r, name) for r in rows])
                                        for name in ("percentage",) + METRICS))

    classes = tuple(mean_row([r.classes[i] for r in reports], i + 1) for i in range(k))
    return MetricsReport(image, classes, mean_row([r.weighted for r in reports], 0))


WHITE = (255, 255, 255)
RED = (255, 0, 0)


def error_map(gt, pred) -> Raster:
    """White where the prediction is right, red where wrong, black where GT is 0."""
    g, p = _labels(gt), _labels(pred)
    if g.shape != p.shape:
        raise ValueError(f"ground truth {g.shape} and prediction {p.shape} differ in size")
    out = np.zeros(g.shape + (3,), np.uint8)
    counted = g != 0
    out[counted & (g == p)] = WHITE
    out[counted & (g != p)] = RED
    return Raster(out)


# rendering ----------------------------------------------------------------

def _fmt(v) -> str:
    return f"{(UNDEFINED_RENDER if v is None else v):.4f}"


def format_table(report: MetricsReport, class_names) -> str:
    """Aligned text table: one metric per row, Weighted then each class."""
    names = list(class_names)
    header = ["Metric", "Weighted"] + names
    rows = [["Percentage(%)", _fmt(100.0)] + [_fmt(c.percentage if c.percentage is not None else 0.0)
                                             for c in report.classes]]
    for name in METRICS:
        label = "IoU" if name == "iou" else name.capitalize()
        rows.append([label, _fmt(getattr(report.weighted, name))] + [_fmt(getattr(c, name)) for c in report.classes])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [f"[{report.image}]"] if report.image else []
    for r in [header] + rows:
        lines.append("  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


CSV_COLUMNS = ("image", "class", "percentage", "accuracy", "iou", "precision", "recall")


def report_rows(report: MetricsReport, class_names):
    names = list(class_names)
    for c in report.classes:
        pct = 0.0 if c.percentage is None else c.percentage
        yield [report.image, names[c.class_id - 1], _fmt(pct)] + [_fmt(getattr(c, m)) for m in METRICS]
    yield [report.image, "Weighted", _fmt(100.0)] + [_fmt(getattr(report.weighted, m)) for m in METRICS]


def reports_to_csv(reports, class_names) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerows(report_rows(r, class_names))
    return buf.getvalue()
