"""AUC, accuracy and F1 over prediction records."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .protocol import INVALID, PredictionRecord


class MetricError(ValueError):
    pass


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with half credit for tied scores.

    Uses mid-ranks over the pooled scores:
    ``(R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg)``.
    """
    if len(scores) != len(labels):
        raise MetricError("scores and labels differ in length")
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined when only one class is present")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    rank_sum_pos = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        mid_rank = (i + j) / 2 + 1  # 1-based average rank of the tie block
        rank_sum_pos += mid_rank * sum(1 for t in order[i:j + 1] if labels[t] == 1)
        i = j + 1
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


def auc(records: Sequence[PredictionRecord]) -> float:
    return auc_score([r.empirical_p for r in records], [r.ground_truth for r in records])


def accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise MetricError("accuracy of zero records")
    return sum(1 for r in records if r.majority_correct == r.ground_truth) / len(records)


@dataclass(frozen=True)
class F1Result:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    zero_division: bool


def f1_detail(records: Sequence[PredictionRecord]) -> F1Result:
    """F1 with ``correct`` (y = 1) as the positive class; 0/0 terms become 0 and are flagged."""
    if not records:
        raise MetricError("F1 of zero records")
    tp = sum(1 for r in records if r.majority_correct == 1 and r.ground_truth == 1)
    fp = sum(1 for r in records if r.majority_correct == 1 and r.ground_truth == 0)
    fn = sum(1 for r in records if r.majority_correct == 0 and r.ground_truth == 1)
    zero = tp + fp == 0 or tp + fn == 0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2TP / (2TP + FP + FN) equals 2PR / (P + R) but needs only one rounding
    score = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return F1Result(score, precision, recall, tp, fp, fn, zero or tp == 0)


def f1(records: Sequence[PredictionRecord]) -> float:
    return f1_detail(records).f1


@dataclass(frozen=True)
class MetricsSummary:
    auc: float | None
    accuracy: float
    f1: float
    n: int
    invalid_rate: float
    degenerate: int
    f1_zero_division: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records: Sequence[PredictionRecord]) -> MetricsSummary:
    """All three metrics plus sample health; ``auc`` is None for single-class input."""
    if not records:
        raise MetricError("no records to summarize")
    try:
        a = auc(records)
    except MetricError:
        a = None
    f = f1_detail(records)
    n_samples = sum(len(r.outcomes) for r in records)
    n_invalid = sum(1 for r in records for o in r.outcomes if o.label == INVALID)
    return MetricsSummary(
        auc=a,
        accuracy=accuracy(records),
        f1=f.f1,
        n=len(records),
        invalid_rate=n_invalid / n_samples if n_samples else 0.0,
        degenerate=sum(1 for r in records if r.degenerate),
        f1_zero_division=f.zero_division,
    )


SUMMARY_FIELDS = ("auc", "accuracy", "f1", "n", "invalid_rate", "degenerate", "f1_zero_division")


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def summary_csv(rows: Iterable[tuple[dict, MetricsSummary]]) -> str:
    """CSV with the caller's label columns followed by the metric columns."""
    rows = list(rows)
    label_cols: list[str] = []
    for labels, _ in rows:
        label_cols += [k for k in labels if k not in label_cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(label_cols + list(SUMMARY_FIELDS))
    for labels, s in rows:
        d = s.to_dict()
        w.writerow([labels.get(c, "") for c in label_cols] + [_fmt(d[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()
