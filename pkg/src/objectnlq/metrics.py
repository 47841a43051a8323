"""Temporal IoU and recall-at-k evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

log = logging.getLogger(__name__)

THRESHOLDS = (0.3, 0.5)
TABLE_COLUMNS = ("R@1 0.3", "R@1 0.5", "Mean", "R@5 0.3", "R@5 0.5")


def tiou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def hits_at_k(preds, gt, k: int, thr: float) -> bool:
    return any(tiou(p[:2], gt) >= thr for p in preds[:k])


def recall_at_k(preds_per_query: dict, gt_per_query: dict, k: int, thr: float) -> float:
    """Percentage of ground-truth queries with a top-k hit at tIoU >= thr.

    Queries without predictions count as misses.
    """
    if not gt_per_query:
        return 0.0
    hit = 0
    for qid, gt in gt_per_query.items():
        preds = preds_per_query.get(qid)
        if preds is None:
            log.warning("query %s has no predictions; counted as a miss", qid)
            continue
        hit += hits_at_k(preds, gt, k, thr)
    return 100.0 * hit / len(gt_per_query)


def mean_r1(r1_03: float, r1_05: float) -> float:
    return (r1_03 + r1_05) / 2.0


def round2(x: float) -> float:
    """Two-decimal half-up rounding of the exact decimal value of ``x``'s repr."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    r1_03: float
    r1_05: float
    r5_03: float
    r5_05: float
    mean_r1: float
    num_queries: int = 0
    per_query: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    unexpected: list = field(default_factory=list)

    def rounded(self):
        return {k: round2(getattr(self, k)) for k in ("r1_03", "r1_05", "mean_r1", "r5_03", "r5_05")}

    def to_json(self):
        d = {
            "metrics": self.rounded(),
            "raw": {k: getattr(self, k) for k in ("r1_03", "r1_05", "mean_r1", "r5_03", "r5_05")},
            "num_queries": self.num_queries,
            "missing_predictions": self.missing,
            "unexpected_predictions": self.unexpected,
            "per_query": self.per_query,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def table(self, label="model"):
        r = self.rounded()
        vals = [r["r1_03"], r["r1_05"], r["mean_r1"], r["r5_03"], r["r5_05"]]
        return format_table([(label, vals)])


def format_table(rows, label_header="Entry"):
    """Aligned text table with the five recall columns."""
    width = max([len(label_header)] + [len(r[0]) for r in rows])
    widths = [max(len(c), 6) for c in TABLE_COLUMNS]
    head = f"{label_header:<{width}} | " + " | ".join(f"{c:>{w}}" for c, w in zip(TABLE_COLUMNS, widths))
    lines = [head, "-" * len(head)]
    for label, vals in rows:
        cells = [f"{v:>{w}.2f}" for v, w in zip(vals, widths)]
        lines.append(f"{label:<{width}} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def report_from_recalls(r1_03, r1_05, r5_03=0.0, r5_05=0.0):
    return EvalReport(r1_03, r1_05, r5_03, r5_05, mean_r1(r1_03, r1_05))


def evaluate(preds_per_query: dict, gt_per_query: dict) -> EvalReport:
    missing = sorted(q for q in gt_per_query if q not in preds_per_query)
    unexpected = sorted(q for q in preds_per_query if q not in gt_per_query)
    if missing:
        log.warning("%d queries lack predictions: %s", len(missing), missing[:10])
    if unexpected:
        log.warning("%d predicted queries are not annotated: %s", len(unexpected), unexpected[:10])
    r = {(k, thr): recall_at_k(preds_per_query, gt_per_query, k, thr) for k in (1, 5) for thr in THRESHOLDS}
    per_query = {}
    for qid, gt in sorted(gt_per_query.items()):
        preds = preds_per_query.get(qid, [])
        per_query[qid] = {f"r{k}@{thr}": hits_at_k(preds, gt, k, thr) for k in (1, 5) for thr in THRESHOLDS}
    return EvalReport(
        r1_03=r[(1, 0.3)],
        r1_05=r[(1, 0.5)],
        r5_03=r[(5, 0.3)],
        r5_05=r[(5, 0.5)],
        mean_r1=mean_r1(r[(1, 0.3)], r[(1, 0.5)]),
        num_queries=len(gt_per_query),
        per_query=per_query,
        missing=missing,
        unexpected=unexpected,
    )
