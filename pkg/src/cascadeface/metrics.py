"""Detection evaluation: greedy ground-truth matching, confusion-matrix
accumulation, the derived metric suite, and detector comparison tables.

Matching is one-to-one and greedy by descending detection score; counts are
per ground-truth face. Metrics with a zero denominator are reported as
undefined (None), distinct from zero.
"""

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import boxes as bx


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion-matrix counts must be non-negative")

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricsReport:
    """Percentages in [0, 100]; None marks an undefined (0/0) metric."""

    precision: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    f1: Optional[float]
    accuracy: Optional[float]


def match_detections(det_boxes, det_scores, truth_boxes, iou_threshold=0.5):
    """Greedy matching of detections to ground truth.

    In descending score order (ties by ascending index) each detection claims
    the unmatched truth with the highest IoU at or above the threshold.
    Returns (tp, fp, fn).
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float32).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float32).reshape(-1)
    truth_boxes = np.asarray(truth_boxes, dtype=np.float32).reshape(-1, 4)
    n_det = len(det_boxes)
    n_truth = len(truth_boxes)
    if n_det == 0:
        return 0, 0, n_truth
    order = np.lexsort((np.arange(n_det), -det_scores))
    matched = np.zeros(n_truth, dtype=bool)
    tp = 0
    for i in order:
        if not n_truth:
            break
        overlaps = bx.iou_one_to_many(det_boxes[i], truth_boxes)
        overlaps[matched] = -1.0
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_threshold:
            matched[j] = True
            tp += 1
    fp = n_det - tp
    fn = n_truth - tp
    return tp, fp, fn


def match_detection_list(dets, truth_boxes, iou_threshold=0.5):
    """match_detections over a list of Detection."""
    return match_detections(bx.boxes_array(dets), bx.scores_array(dets),
                            truth_boxes, iou_threshold)


def _ratio(num, denom):
    if denom == 0:
        return None
    return 100.0 * num / denom


def compute_metrics(cm):
    """Precision, recall, specificity, F1, and accuracy as percentages."""
    return MetricsReport(
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        recall=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        f1=_ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        accuracy=_ratio(cm.tp + cm.tn, cm.tp + cm.tn + cm.fp + cm.fn),
    )


_METRIC_COLUMNS = ("Precision", "Recall", "Specificity", "F1", "Accuracy")


def _fmt_pct(v):
    return "undefined" if v is None else f"{v:.2f}%"


def metrics_rows(report):
    return [("Precision", report.precision), ("Recall", report.recall),
            ("Specificity", report.specificity), ("F1", report.f1),
            ("Accuracy", report.accuracy)]


def metrics_text(report):
    """Aligned two-column rendering of one MetricsReport."""
    rows = [(name, _fmt_pct(v)) for name, v in metrics_rows(report)]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {val}" for name, val in rows) + "\n"


def metrics_csv(report):
    buf = io.StringIO()
    buf.write("metric,value_pct\n")
    for name, v in metrics_rows(report):
        buf.write(f"{name.lower()},{'' if v is None else f'{v:.4f}'}\n")
    return buf.getvalue()


def compare_report(rows, fmt="text"):
    """Detector-vs-metric table: rows are (name, accuracy percentage) or
    (name, MetricsReport). Pass-through formatting only."""
    full = any(isinstance(v, MetricsReport) for _, v in rows)
    if full:
        header = ("Algorithm",) + _METRIC_COLUMNS
        table = []
        for name, v in rows:
            if isinstance(v, MetricsReport):
                table.append((name,) + tuple(_fmt_pct(x) for _, x in metrics_rows(v)))
            else:
                table.append((name, "", "", "", "", _fmt_pct(float(v))))
    else:
        header = ("Algorithm", "Accuracy")
        table = [(name, _fmt_pct(float(v))) for name, v in rows]

    if fmt == "csv":
        out = [",".join(header)]
        out += [",".join(str(c) for c in row) for row in table]
        return "\n".join(out) + "\n"
    widths = [max(len(str(r[i])) for r in [header] + table) for i in range(len(header))]
    lines = ["  ".join(f"{str(c):<{w}}" for c, w in zip(row, widths)).rstrip()
             for row in [header] + table]
    return "\n".join(lines) + "\n"


def load_manifest(path):
    """Parse a ground-truth manifest: one line per image,
    "image_path x1 y1 x2 y2 [x1 y1 x2 y2 ...]"."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            coords = parts[1:]
            if len(coords) % 4 != 0:
                raise ValueError(
                    f"{path}:{line_no}: coordinate count {len(coords)} "
                    "is not a multiple of 4")
            boxes = np.array([float(v) for v in coords],
                             dtype=np.float32).reshape(-1, 4)
            entries.append((parts[0], boxes))
    return entries


def manifest_text(entries):
    """Render (image_path, boxes) pairs as manifest text."""
    lines = []
    for path, boxes in entries:
        coords = " ".join(f"{v:.2f}" for box in np.asarray(boxes).reshape(-1, 4)
                          for v in box)
        lines.append(f"{path} {coords}".rstrip())
    return "\n".join(lines) + "\n"
