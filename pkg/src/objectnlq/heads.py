"""Point-based prediction heads, target assignment, and the training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError
from .layers import Conv1d, Module, parameter
from .tensor import Tensor


@dataclass(frozen=True)
class PyramidPoint:
    level: int
    index: int
    time_s: float
    regression_range: tuple


def regression_range(level: int, levels: int, base_stride_s: float, base_steps: float = 4.0):
    """Range of max(d_start, d_end) a point at ``level`` is responsible for."""
    r0 = base_steps * base_stride_s
    lo = 0.0 if level == 0 else (2 ** (level - 1)) * r0
    hi = math.inf if level == levels - 1 else (2**level) * r0
    return lo, hi


def pyramid_points(lengths, base_stride_s: float, base_steps: float = 4.0):
    """Flattened point table for levels with ``lengths[l]`` positions each.

    Returns a dict of parallel arrays: level, index, time, range_lo, range_hi.
    """
    levels = len(lengths)
    cols = {k: [] for k in ("level", "index", "time", "range_lo", "range_hi")}
    for level, n in enumerate(lengths):
        lo, hi = regression_range(level, levels, base_stride_s, base_steps)
        idx = np.arange(n)
        cols["level"].append(np.full(n, level))
        cols["index"].append(idx)
        cols["time"].append(idx * (2**level) * base_stride_s)
        cols["range_lo"].append(np.full(n, lo))
        cols["range_hi"].append(np.full(n, hi))
    return {k: np.concatenate(v) for k, v in cols.items()}


def points_as_objects(table):
    return [
        PyramidPoint(int(l), int(i), float(t), (float(lo), float(hi)))
        for l, i, t, lo, hi in zip(table["level"], table["index"], table["time"], table["range_lo"], table["range_hi"])
    ]


class AslParams(Module):
    """Per-level learnable Gaussian centre (rho) and width (tau), both pre-sigmoid."""

    def __init__(self, levels: int):
        self.rho_raw = parameter(np.zeros(levels))
        self.tau_raw = parameter(np.zeros(levels))

    def mapped(self):
        return T.sigmoid(self.rho_raw), T.sigmoid(self.tau_raw)


class PredictionHeads(Module):
    """Classification and regression conv stacks shared across pyramid levels."""

    def __init__(self, rng, cfg, prior: float = 0.01):
        d = cfg.model_dim
        self.cls_convs = [Conv1d(rng, d, d) for _ in range(cfg.head_layers - 1)]
        self.cls_out = Conv1d(rng, d, 1)
        self.reg_convs = [Conv1d(rng, d, d) for _ in range(cfg.head_layers - 1)]
        self.reg_out = Conv1d(rng, d, 2)
        dtype = self.cls_out.bias.data.dtype
        self.cls_out.bias.data = np.full(1, -math.log((1 - prior) / prior), dtype=dtype)
        self.reg_out.bias.data = np.ones(2, dtype=dtype)


def _stack(convs, x, mask):
    m = Tensor(mask[..., None], dtype=x.dtype)
    for conv in convs:
        x = T.relu(conv(x)) * m
    return x, m


def heads_forward(model, pyramid, base_stride_s):
    """Per-point logits (B, P) and nonnegative offsets in seconds (B, P, 2).

    ``pyramid`` is the output of ``multiscale_forward``; ``base_stride_s`` is
    a scalar or a (B,) array.  Points are ordered level by level.
    """
    heads = model.heads
    B = pyramid[0][0].shape[0]
    base = np.broadcast_to(np.asarray(base_stride_s, dtype=float), (B,))
    logits, offsets, masks = [], [], []
    for x, mask, stride in pyramid:
        h, m = _stack(heads.cls_convs, x, mask)
        logits.append(T.reshape(heads.cls_out(h), (B, -1)))
        r, m = _stack(heads.reg_convs, x, mask)
        scale = Tensor((stride * base)[:, None, None], dtype=x.dtype)
        offsets.append(T.relu(heads.reg_out(r)) * scale * m)
        masks.append(mask)
    return T.concat(logits, axis=1), T.concat(offsets, axis=1), np.concatenate(masks, axis=1)


def forward(model, inputs, base_stride_s):
    """Encoders, pyramid and heads in one call."""
    from .encoders import encode

    return heads_forward(model, encode(model, inputs), base_stride_s)


# ---------------------------------------------------------------- targets


@dataclass
class TargetAssignment:
    label: np.ndarray  # (P,) 0/1
    gt_offsets: np.ndarray  # (P, 2) seconds, meaningful where label == 1
    asl_weight: np.ndarray | None = None


def assign_targets(table, gt_segment, valid=None):
    s, e = map(float, gt_segment)
    if not e > s:
        raise DataError(f"ground-truth segment must satisfy start < end, got ({s}, {e})")
    t = table["time"]
    d_start, d_end = t - s, e - t
    reach = np.maximum(d_start, d_end)
    label = (d_start >= 0) & (d_end >= 0) & (reach > table["range_lo"]) & (reach <= table["range_hi"])
    if valid is not None:
        label &= np.asarray(valid, dtype=bool)
    return TargetAssignment(label.astype(np.int64), np.stack([d_start, d_end], axis=-1))


def gaussian_asl_weight(times, levels, segments, asl: AslParams, sigma_floor: float = 0.25):
    """Gaussian emphasis of positive points around a learnable in-segment centre.

    ``times``, ``levels`` are (N,) arrays for positive points and ``segments``
    the (N, 2) ground truth of each.  Returns a (N,) tensor in (0, 1].
    """
    rho, tau = asl.mapped()
    levels = np.asarray(levels, dtype=np.int64)
    seg = np.asarray(segments, dtype=float)
    start = Tensor(seg[:, 0], dtype=rho.dtype)
    length = Tensor(seg[:, 1] - seg[:, 0], dtype=rho.dtype)
    mu = start + T.getitem(rho, levels) * length
    sigma = T.maximum(T.getitem(tau, levels) * length, sigma_floor)
    diff = Tensor(np.asarray(times, dtype=float), dtype=rho.dtype) - mu
    return T.exp(-(T.square(diff) / (2.0 * T.square(sigma))))


def focal_elements(logits, labels, gamma=2.0, alpha=0.25):
    y = np.asarray(labels, dtype=logits.dtype)
    yt = Tensor(y, dtype=logits.dtype)
    ce = T.softplus(logits) - logits * yt
    p = T.sigmoid(logits)
    one_minus_pt = p * Tensor(1.0 - 2.0 * y, dtype=logits.dtype) + yt
    alpha_t = Tensor(alpha * y + (1.0 - alpha) * (1.0 - y), dtype=logits.dtype)
    if gamma == 2:
        mod = T.square(one_minus_pt)
    else:
        mod = T.exp(T.log(T.maximum(one_minus_pt, 1e-30)) * gamma)
    return alpha_t * mod * ce


def focal_bce_loss(logits, labels, weights=None, gamma=2.0, alpha=0.25):
    """Sigmoid focal loss summed over points and divided by the positive count (min 1)."""
    el = focal_elements(logits, labels, gamma, alpha)
    if weights is not None:
        el = el * (weights if isinstance(weights, Tensor) else Tensor(weights, dtype=el.dtype))
    npos = max(int(np.sum(labels)), 1)
    return T.tsum(el) * (1.0 / npos)


def diou_terms(ps, pe, gs, ge, eps=1e-6):
    """Per-interval 1-D DIoU loss for predicted [ps, pe] versus ground truth [gs, ge]."""
    len_p = T.maximum(pe - ps, eps)
    len_g = ge - gs
    inter = T.maximum(T.minimum(pe, ge) - T.maximum(ps, gs), 0.0)
    union = len_p + len_g - inter
    iou = inter / union
    enclose = T.maximum(T.maximum(pe, ge) - T.minimum(ps, gs), eps)
    centre = ((ps + pe) - (gs + ge)) * 0.5
    return 1.0 - iou + T.square(centre) / T.square(enclose)


def diou_regression_loss(pred_offsets, gt_offsets, weights=None):
    """Mean weighted DIoU over positives; offsets are (N, 2) distances to start and end."""
    gt = np.asarray(gt_offsets, dtype=float)
    n = gt.shape[0]
    if n == 0:
        return Tensor(0.0)
    ps = -T.getitem(pred_offsets, (slice(None), 0))
    pe = T.getitem(pred_offsets, (slice(None), 1))
    gs = Tensor(-gt[:, 0], dtype=pred_offsets.dtype)
    ge = Tensor(gt[:, 1], dtype=pred_offsets.dtype)
    terms = diou_terms(ps, pe, gs, ge)
    if weights is not None:
        terms = terms * (weights if isinstance(weights, Tensor) else Tensor(weights, dtype=terms.dtype))
    return T.tsum(terms) * (1.0 / n)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    reg: float
    num_pos: int
    asl_weights: np.ndarray


def build_targets(table_per_sample, segments, point_mask):
    """Stack per-sample assignments into (B, P) label and (B, P, 2) offset arrays."""
    labels, offs = [], []
    for b, (table, seg) in enumerate(zip(table_per_sample, segments)):
        a = assign_targets(table, seg, point_mask[b])
        labels.append(a.label)
        offs.append(a.gt_offsets)
    return np.stack(labels), np.stack(offs)


def total_loss(model, logits, offsets, point_mask, tables, segments, log=None):
    """Focal classification plus weighted DIoU regression over a batch."""
    cfg = model.config
    B, P = logits.shape
    labels, gt_offsets = build_targets(tables, segments, point_mask)
    valid = np.asarray(point_mask, dtype=bool)
    flat_labels = labels.reshape(-1)
    pos_idx = np.flatnonzero(valid.reshape(-1) & (flat_labels == 1))
    neg_idx = np.flatnonzero(valid.reshape(-1) & (flat_labels == 0))
    order = np.concatenate([pos_idx, neg_idx])
    flat_logits = T.reshape(logits, (B * P,))
    sel_logits = T.getitem(flat_logits, order)
    sel_labels = np.concatenate([np.ones(len(pos_idx)), np.zeros(len(neg_idx))])

    npos = len(pos_idx)
    if npos and cfg.asl == "on":
        b_idx, p_idx = np.divmod(pos_idx, P)
        times = np.stack([tables[b]["time"][p] for b, p in zip(b_idx, p_idx)])
        levels = np.stack([tables[b]["level"][p] for b, p in zip(b_idx, p_idx)])
        segs = np.asarray(segments, dtype=float)[b_idx]
        w_pos = gaussian_asl_weight(times, levels, segs, model.asl, cfg.asl_sigma_floor)
    else:
        w_pos = Tensor(np.ones(npos), dtype=logits.dtype)
    weights = T.concat([w_pos, Tensor(np.ones(len(neg_idx)), dtype=logits.dtype)], axis=0)

    cls = focal_bce_loss(sel_logits, sel_labels, weights, cfg.focal_gamma, cfg.focal_alpha)
    if npos == 0:
        if log is not None:
            log.warning("batch has no positive points; regression loss skipped")
        total = cls
        reg_val = 0.0
    else:
        pred = T.getitem(T.reshape(offsets, (B * P, 2)), pos_idx)
        reg = diou_regression_loss(pred, gt_offsets.reshape(-1, 2)[pos_idx], w_pos)
        total = cls + reg * cfg.reg_weight
        reg_val = float(reg.data)
    return LossBreakdown(total, float(cls.data), reg_val, npos, np.asarray(w_pos.data))
