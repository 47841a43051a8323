"""Turning per-point outputs into ranked segments: decoding, SoftNMS, fold ensembling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metrics import tiou


@dataclass
class SegmentPrediction:
    start_s: float
    end_s: float
    score: float
    source_model: str | None = None

    def as_list(self):
        return [self.start_s, self.end_s, self.score]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def decode(times, logits, offsets, duration_s, valid=None, pre_nms_topk=100, score_floor=0.0, min_length=1e-3, source=None):
    """Convert point outputs of one video into segments sorted by score.

    Segments are clamped into [0, duration_s]; those shorter than
    ``min_length`` after clamping are dropped.
    """
    times = np.asarray(times, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    scores = _sigmoid(logits)
    start = np.clip(times - offsets[:, 0], 0.0, duration_s)
    end = np.clip(times + offsets[:, 1], 0.0, duration_s)
    keep = (end - start >= min_length) & (scores > score_floor)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(keep)
    idx = idx[np.argsort(-scores[idx], kind="stable")][:pre_nms_topk]
    return [SegmentPrediction(float(start[i]), float(end[i]), float(scores[i]), source) for i in idx]


def soft_nms(preds, sigma: float = 0.5, keep: int = 5):
    """Gaussian SoftNMS.

    Repeatedly emits the highest remaining score and multiplies every other
    remaining score by exp(-tIoU^2 / sigma).  Ties go to the earlier entry.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if keep < 1:
        raise ValueError("keep must be >= 1")
    pool = [SegmentPrediction(p.start_s, p.end_s, p.score, p.source_model) for p in preds]
    out = []
    while pool and len(out) < keep:
        best = max(range(len(pool)), key=lambda i: (pool[i].score, -i))
        top = pool.pop(best)
        out.append(top)
        for p in pool:
            ov = tiou((top.start_s, top.end_s), (p.start_s, p.end_s))
            if ov > 0:
                p.score *= math.exp(-(ov * ov) / sigma)
    return out


def ensemble_merge(per_model_preds, sigma: float = 0.5, keep: int = 5):
    """Pool every model's candidates for one query and deduplicate jointly."""
    if not per_model_preds:
        raise ValueError("ensemble_merge needs at least one model")
    pool = [p for preds in per_model_preds for p in preds]
    return soft_nms(pool, sigma, keep)
