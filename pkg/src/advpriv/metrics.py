"""
Classification metrics, ROC/AUC, recall-band threshold calibration,
stratified k-fold plans and median-of-runs aggregation.

Undefined ratios (zero denominators) are reported as NaN, never as 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import CalibrationError, RejectedInputError

RECALL_BAND = (0.73, 0.87)

METRIC_COLUMNS = ("Recall", "Precision", "F1-Score", "Accuracy", "Specificity", "PPV", "NPV", "AUC")
THRESHOLD_COLUMN = "Threshold"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricSet:
    recall: float
    precision: float
    f1: float
    accuracy: float
    specificity: float
    ppv: float
    npv: float
    auc: float
    threshold: float = float("nan")

    def values(self, with_threshold=True):
        vals = astuple(self)
        return vals if with_threshold else vals[:-1]


def _binary(name, arr):
    arr = np.asarray(arr)
    if arr.ndim != 1:
        raise RejectedInputError(f"{name} must be a vector")
    if not np.all((arr == 0) | (arr == 1)):
        raise RejectedInputError(f"{name} must be binary")
    return arr.astype(np.int64)


def confusion(labels, predictions) -> ConfusionCounts:
    labels = _binary("labels", labels)
    predictions = _binary("predictions", predictions)
    if labels.shape != predictions.shape:
        raise RejectedInputError(f"length mismatch: {labels.size} labels vs {predictions.size} predictions")
    tp = int(np.sum((labels == 1) & (predictions == 1)))
    fp = int(np.sum((labels == 0) & (predictions == 1)))
    fn = int(np.sum((labels == 1) & (predictions == 0)))
    tn = int(np.sum((labels == 0) & (predictions == 0)))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den):
    return num / den if den else float("nan")


def metric_set(counts: ConfusionCounts, auc=float("nan"), threshold=float("nan")) -> MetricSet:
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    if np.isnan(recall) or np.isnan(precision) or recall + precision == 0:
        f1 = float("nan")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricSet(
        recall=recall,
        precision=precision,
        f1=f1,
        accuracy=_ratio(counts.tp + counts.tn, counts.total),
        specificity=_ratio(counts.tn, counts.tn + counts.fp),
        ppv=precision,
        npv=_ratio(counts.tn, counts.tn + counts.fn),
        auc=float(auc),
        threshold=float(threshold),
    )


def roc_auc(scores, labels):
    """AUC by trapezoidal integration over every distinct score threshold.

    Returns ``(auc, points)`` where ``points`` is an ``(m, 3)`` array of
    ``(fpr, tpr, threshold)`` rows, starting at ``(0, 0, +inf)``. Tied scores
    produce a diagonal segment, which is worth half a concordant pair.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary("labels", labels)
    if scores.shape != labels.shape:
        raise RejectedInputError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise RejectedInputError("ROC needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1)
    tps = np.cumsum(y)[ends]
    fps = ends + 1 - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thr = np.concatenate([[np.inf], s[ends]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, np.column_stack([fpr, tpr, thr])


def auc_score(scores, labels) -> float:
    return roc_auc(scores, labels)[0]


def evaluate(scores, labels, threshold) -> MetricSet:
    """Full metric set for ``scores`` thresholded with ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary("labels", labels)
    preds = (scores >= threshold).astype(np.int64)
    try:
        auc = auc_score(scores, labels)
    except RejectedInputError:
        auc = float("nan")
    return metric_set(confusion(labels, preds), auc=auc, threshold=threshold)


def calibrate_threshold(cv_scores_per_fold, recall_band=RECALL_BAND) -> float:
    """Pick a decision threshold from pooled out-of-fold scores.

    ``cv_scores_per_fold`` is a sequence of ``(scores, labels)`` pairs. Every
    distinct pooled score is a candidate (positive iff ``score >= t``). Among
    candidates whose pooled recall lies in the band, the one with the highest
    specificity wins; failing that, the candidate with the smallest recall
    at or above the band floor. Ties go to the larger threshold.
    """
    folds = list(cv_scores_per_fold)
    if len(folds) < 2:
        raise RejectedInputError("calibration needs at least two folds")
    for i, (_, y) in enumerate(folds):
        y = np.asarray(y)
        if y.min() == y.max():
            raise RejectedInputError(f"fold {i} lacks one of the classes")
    scores = np.concatenate([np.asarray(s, dtype=np.float64) for s, _ in folds])
    labels = np.concatenate([_binary("labels", y) for _, y in folds])
    return calibrate_pooled(scores, labels, recall_band)


def calibrate_pooled(scores, labels, recall_band=RECALL_BAND) -> float:
    """The selection rule of :func:`calibrate_threshold` on one pool of scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary("labels", labels)
    if scores.shape != labels.shape:
        raise RejectedInputError("scores and labels differ in length")
    if labels.size == 0 or labels.min() == labels.max():
        raise RejectedInputError("calibration needs both classes present")
    lo, hi = recall_band
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    # descending distinct thresholds with cumulative counts at ">= t"
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ends = np.append(np.flatnonzero(np.diff(s) != 0), s.size - 1)
    tps = np.cumsum(y)[ends]
    fps = ends + 1 - tps
    thr = s[ends]
    recall = tps / n_pos
    spec = (n_neg - fps) / n_neg

    in_band = (recall >= lo) & (recall <= hi)
    if in_band.any():
        best = np.max(spec[in_band])
        cand = np.flatnonzero(in_band & (spec == best))
        return float(thr[cand].max())
    above = recall >= lo
    if not above.any():
        raise CalibrationError(f"no threshold reaches recall {lo}")
    best = np.min(recall[above])
    cand = np.flatnonzero(above & (recall == best))
    return float(thr[cand].max())


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray
    stratify_on: str = "label"

    def folds(self):
        """Yield ``(train_idx, test_idx)`` for each fold in order."""
        for f in range(self.k):
            test = np.flatnonzero(self.assignments == f)
            train = np.flatnonzero(self.assignments != f)
            yield train, test


def stratified_kfold(labels, k=10, seed=0, stratify_on="label") -> FoldPlan:
    """Shuffle each class and deal its rows round-robin over ``k`` folds.

    Negatives continue the deal where positives stopped, so fold sizes also
    differ by at most one.
    """
    labels = _binary("labels", labels)
    if k < 2:
        raise RejectedInputError("k must be at least 2")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos < k or n_neg < k:
        raise RejectedInputError(f"stratified {k}-fold needs >= {k} rows per class, got {n_pos} pos / {n_neg} neg")
    rng = np.random.default_rng(seed)
    assign = np.empty(labels.size, dtype=np.int64)
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    assign[pos] = np.arange(pos.size) % k
    assign[neg] = (np.arange(neg.size) + pos.size) % k
    return FoldPlan(k=k, assignments=assign, stratify_on=stratify_on)


def median_of_runs(metric_sets) -> MetricSet:
    runs = list(metric_sets)
    if len(runs) < 3:
        raise RejectedInputError(f"median of runs needs at least 3 runs, got {len(runs)}")
    table = np.array([astuple(m) for m in runs], dtype=np.float64)
    return MetricSet(*np.median(table, axis=0).tolist())


# ---------------------------------------------------------------------------
# report tables


def _cell(v):
    if isinstance(v, str):
        return v
    return "nan" if np.isnan(v) else f"{v:.4f}"


def table_rows(rows, lead_columns, with_threshold):
    """``rows`` is a list of ``(lead_values, MetricSet)``; returns header + string rows."""
    header = list(lead_columns) + list(METRIC_COLUMNS) + ([THRESHOLD_COLUMN] if with_threshold else [])
    body = [list(lead) + [_cell(v) for v in m.values(with_threshold)] for lead, m in rows]
    return header, body


def to_csv(rows, lead_columns, with_threshold=True) -> str:
    header, body = table_rows(rows, lead_columns, with_threshold)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


def to_text(rows, lead_columns, with_threshold=True, title=None) -> str:
    header, body = table_rows(rows, lead_columns, with_threshold)
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


METRIC_FIELDS = tuple(f.name for f in fields(MetricSet))
