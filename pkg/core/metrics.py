"""
Classification metrics from confusion matrices, repeated-run statistics
and the Pearson correlation used by cross-run reports.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from core.errors import ShapeError, StatisticsError
from core.models import ClassMetrics, ConfusionMatrix, MetricsReport

logger = logging.getLogger(__name__)


def confusion(
    true_labels: Sequence[int],
    pred_labels: Sequence[int],
    num_classes: int,
    class_names: Optional[Sequence[str]] = None,
) -> ConfusionMatrix:
    """counts[t][p] += 1 for every (true, predicted) pair."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ShapeError(f"{t.size} true labels vs {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise StatisticsError(f"{name} label out of range [0, {num_classes})")
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    if len(names) != num_classes:
        raise ShapeError(f"{len(names)} class names for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(class_names=names, counts=counts)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_from_cm(
    cm: ConfusionMatrix,
    loss: Optional[float] = None,
    training_time_min: Optional[float] = None,
    eval_loss: Optional[float] = None,
) -> MetricsReport:
    """
    One-vs-rest per class, macro-averaged.

    A class with no true and no predicted samples scores 0 and is left out
    of the macro denominators; the report carries a warning naming it.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise StatisticsError("confusion matrix is empty")

    per_class = []
    warnings = []
    for c, name in enumerate(cm.class_names):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        tn = total - tp - fp - fn
        degenerate = tp + fp + fn == 0
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = min(1.0, 2 * precision * recall / (precision + recall)) if precision + recall else 0.0
        per_class.append(
            ClassMetrics(
                class_name=name, tp=tp, fp=fp, fn=fn, tn=tn,
                precision=precision, recall=recall, f1=f1, degenerate=degenerate,
            )
        )
        if degenerate:
            warnings.append(f"class {name!r} has no true or predicted samples; excluded from macro averages")
            logger.warning("Degenerate class excluded from macro average", extra={"class_name": name})

    scored = [m for m in per_class if not m.degenerate]
    tp_sum = sum(m.tp for m in per_class)
    fp_sum = sum(m.fp for m in per_class)
    fn_sum = sum(m.fn for m in per_class)

    return MetricsReport(
        accuracy=int(np.trace(counts)) / total,
        precision=float(np.mean([m.precision for m in scored])),
        recall=float(np.mean([m.recall for m in scored])),
        f1=float(np.mean([m.f1 for m in scored])),
        micro_precision=_ratio(tp_sum, tp_sum + fp_sum),
        micro_recall=_ratio(tp_sum, tp_sum + fn_sum),
        per_class=per_class,
        loss=loss,
        eval_loss=eval_loss,
        training_time_min=training_time_min,
        warnings=warnings,
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation; clipped to [-1, 1]."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise StatisticsError(f"pearson needs two equal-length vectors, got {xa.shape} and {ya.shape}")
    if xa.size < 2:
        raise StatisticsError("pearson needs at least two points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise StatisticsError("pearson is undefined for a zero-variance series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def run_stats(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample (n - 1) standard deviation."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size < 2:
        raise StatisticsError(f"standard deviation needs at least two runs, got {arr.size}")
    return float(arr.mean()), float(arr.std(ddof=1))


def format_mean_std(values: Sequence[float], digits: int = 2, scale: float = 1.0) -> str:
    """'a ± b' over repeated runs; a single run prints without the deviation."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1) * scale
    if arr.size == 0:
        return "n/a"
    if arr.size == 1:
        return f"{arr[0]:.{digits}f}"
    mean, std = run_stats(arr)
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


__all__ = ["confusion", "metrics_from_cm", "pearson", "run_stats", "format_mean_std"]
