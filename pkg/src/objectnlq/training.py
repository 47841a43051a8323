"""Training schedule, optimizer, checkpoints, inference and fold ensembles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, collate, decode_fmx, encode_fmx, make_folds, write_jsonl
from .encoders import GroundingModel, ModelConfig, init_object_params_from_text
from .errors import ConfigError, DataError, FormatError, NonFiniteError, ObjectNLQError
from .heads import forward, pyramid_points, total_loss
from .postprocess import SegmentPrediction, decode, ensemble_merge

log = logging.getLogger(__name__)

PROFILES = {
    "nlq": {"batch_size": 4, "base_lr": 1e-4, "object_branch": "on"},
    "goalstep": {"batch_size": 8, "base_lr": 2e-4, "object_branch": "off"},
}


class TrainingDiverged(ObjectNLQError):
    exit_code = 1


@dataclass
class TrainConfig:
    batch_size: int = 4
    base_lr: float = 1e-4
    warmup_epochs: int = 4
    total_epochs: int = 10
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    clip_grad_norm: float = 1.0
    pre_nms_topk: int = 100
    score_floor: float = 0.0
    nms_sigma: float = 0.5
    keep: int = 5

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs < total_epochs")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        self.model.validate()

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_profile(cls, profile="nlq", **overrides):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        p = PROFILES[profile]
        model = overrides.pop("model", None) or ModelConfig()
        if isinstance(model, dict):
            model = ModelConfig.from_dict(model)
        model = dataclasses.replace(model, object_branch=p["object_branch"])
        return cls(batch_size=p["batch_size"], base_lr=p["base_lr"], model=model, **overrides)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def fit_to_dataset(cfg: TrainConfig, dataset: Dataset) -> TrainConfig:
    """Copy of ``cfg`` whose input widths match the dataset's feature files."""
    samples = next((v for v in dataset.splits.values() if v), None)
    if samples is None:
        raise DataError(f"{dataset.root}: dataset has no queries")
    s = samples[0]
    dims = {"video_dim": int(s.video.shape[1]), "text_dim": int(s.text.shape[1])}
    if s.objects is not None:
        dims["object_dim"] = int(s.objects.embeddings.shape[1])
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **dims))


# ---------------------------------------------------------------- schedule


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to base_lr, then half-cosine decay to zero at the last step."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    span = max(total - 1 - warm, 1)
    p = min((step - warm) / span, 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * p))


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay applied to matrices/kernels only."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def clip(self, max_norm):
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None)
        norm = math.sqrt(sq)
        if max_norm and norm > max_norm:
            scale = max_norm / (norm + 1e-6)
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * p.grad.dtype.type(scale)
        return norm

    def step(self, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m = self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            v = self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            data = p.data
            if data.ndim >= 2 and c.weight_decay:
                data = data * (1.0 - lr * c.weight_decay)
            p.data = (data - lr * upd).astype(p.data.dtype)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, st):
        self.t = int(st["t"])
        self.m = [np.asarray(a, dtype=p.data.dtype).reshape(p.shape) for a, p in zip(st["m"], self.params)]
        self.v = [np.asarray(a, dtype=p.data.dtype).reshape(p.shape) for a, p in zip(st["v"], self.params)]


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"OCK1"


@dataclass
class Checkpoint:
    model: GroundingModel
    train_config: TrainConfig
    epoch: int
    optimizer: dict | None = None
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def config_hash(self):
        return self.model.config.hash()


def _as_matrix(a):
    a = np.asarray(a)
    if a.ndim == 2:
        return a
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a.reshape(a.shape[0], -1)


def save_checkpoint(ckpt: Checkpoint, path):
    """Header JSON then one .fmx block per parameter (and Adam moments) in declared order."""
    named = list(ckpt.model.named_parameters())
    header = {
        "format": "objectnlq-checkpoint/1",
        "train_config": ckpt.train_config.to_dict(),
        "model_config": ckpt.model.config.to_dict(),
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "history": ckpt.history,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer["t"],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", len(blob)), blob]
    for _, p in named:
        parts.append(encode_fmx(_as_matrix(p.data)))
    if ckpt.optimizer is not None:
        for arr in ckpt.optimizer["m"] + ckpt.optimizer["v"]:
            parts.append(encode_fmx(_as_matrix(arr)))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(path, 0, f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 8:
        raise FormatError(path, len(buf), "truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise FormatError(path, len(buf), f"header declares {hlen} bytes, file too short")
    try:
        header = json.loads(buf[8 : 8 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(path, 8 + exc.pos, f"bad header JSON: {exc.msg}") from None
    tcfg = TrainConfig.from_dict(header["train_config"])
    mcfg = ModelConfig.from_dict(header["model_config"])
    tcfg.model = mcfg
    model = GroundingModel(mcfg, seed=0)
    offset = 8 + hlen
    state = {}
    for spec in header["parameters"]:
        m, offset = decode_fmx(buf, path, offset)
        state[spec["name"]] = m.reshape(spec["shape"])
    model.load_state(state)
    opt = None
    if header.get("optimizer_step") is not None:
        moments = []
        while offset < len(buf):
            m, offset = decode_fmx(buf, path, offset)
            moments.append(m)
        n = len(header["parameters"])
        if len(moments) != 2 * n:
            raise FormatError(path, offset, f"expected {2 * n} optimizer blocks, found {len(moments)}")
        opt = {"t": header["optimizer_step"], "m": moments[:n], "v": moments[n:]}
    elif offset != len(buf):
        raise FormatError(path, offset, "trailing bytes after parameter blocks")
    return Checkpoint(model, tcfg, header["epoch"], opt, header.get("metrics", {}), header.get("history", []))


# ---------------------------------------------------------------- batches


def _tables(model, inputs, samples):
    lengths = [-(-inputs.video.shape[1] // 2**l) for l in range(model.config.pyramid_levels)]
    return [pyramid_points(lengths, s.base_stride_s, model.config.range_base_steps) for s in samples]


def run_batch(model, samples):
    """Forward one batch; returns (inputs, logits, offsets, point mask, point tables)."""
    inputs = collate(samples, with_objects=model.config.object_branch == "on")
    strides = np.array([s.base_stride_s for s in samples])
    logits, offsets, pmask = forward(model, inputs, strides)
    return inputs, logits, offsets, pmask, _tables(model, inputs, samples)


def batch_loss(model, samples):
    _, logits, offsets, pmask, tables = run_batch(model, samples)
    return total_loss(model, logits, offsets, pmask, tables, [s.segment for s in samples], log=log)


def training_samples(dataset: Dataset, cfg: TrainConfig, fold_holdout=None, splits=("train",)):
    """Samples a run trains on; with a holdout fold, every split is pooled first."""
    if fold_holdout is None:
        return dataset.samples(splits)
    pool = dataset.samples(list(dataset.splits))
    folds = make_folds([s.video_id for s in pool], cfg.seed)
    if not 0 <= fold_holdout < folds.n_folds:
        raise ConfigError(f"fold_holdout must lie in [0, {folds.n_folds})")
    return [s for s in pool if folds.fold_of(s.video_id) != fold_holdout]


def train(cfg: TrainConfig, dataset: Dataset, fold_holdout=None, splits=("train",), eval_samples=None, audit=None):
    """Run the full schedule and return the final checkpoint.

    ``audit`` (a list) receives one record per optimizer step with the batch
    query/video ids and the learning rate.
    """
    cfg.validate()
    samples = training_samples(dataset, cfg, fold_holdout, splits)
    if not samples:
        raise DataError("no training samples")
    if fold_holdout is not None and eval_samples is None:
        pool = dataset.samples(list(dataset.splits))
        folds = make_folds([s.video_id for s in pool], cfg.seed)
        eval_samples = [s for s in pool if folds.fold_of(s.video_id) == fold_holdout]
    model = GroundingModel(cfg.model, seed=cfg.seed)
    init_object_params_from_text(model)
    opt = AdamW(list(model.named_parameters()), cfg)
    spe = math.ceil(len(samples) / cfg.batch_size)
    step = 0
    history = []
    for epoch in range(cfg.total_epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        losses = []
        for b in range(spe):
            batch = [samples[i] for i in perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            lr = lr_at(step, spe, cfg)
            ids = [s.query_id for s in batch]
            if audit is not None:
                audit.append({"step": step, "epoch": epoch, "lr": lr, "query_ids": ids, "video_ids": [s.video_id for s in batch]})
            try:
                opt.zero_grad()
                out = batch_loss(model, batch)
                out.total.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch} step {step} (lr={lr:.3g}, batch {ids}): {exc}") from exc
            opt.clip(cfg.clip_grad_norm)
            opt.step(lr)
            losses.append(float(out.total.data))
            step += 1
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "first_batch_loss": losses[0], "lr_end": lr}
        if eval_samples:
            rec["holdout"] = evaluate_samples([Checkpoint(model, cfg, epoch + 1)], eval_samples, cfg).rounded()
        history.append(rec)
        log.info("epoch %d loss %.4f %s", epoch, rec["loss"], rec.get("holdout", ""))
    ck = Checkpoint(model, cfg, cfg.total_epochs, opt.state(), {}, history)
    if eval_samples:
        ck.metrics = history[-1].get("holdout", {})
    return ck


# ---------------------------------------------------------------- inference


def model_predictions(model, samples, cfg: TrainConfig, batch_size=8, source=None):
    """Decoded candidates of one model for each sample (before SoftNMS)."""
    out = {}
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = samples[i : i + batch_size]
            _, logits, offsets, pmask, tables = run_batch(model, batch)
            for b, s in enumerate(batch):
                out[s.query_id] = decode(
                    tables[b]["time"],
                    logits.data[b],
                    offsets.data[b],
                    s.duration_s,
                    valid=pmask[b],
                    pre_nms_topk=cfg.pre_nms_topk,
                    score_floor=cfg.score_floor,
                    source=source,
                )
    return out


def check_compatible(checkpoints):
    if not checkpoints:
        raise ConfigError("need at least one checkpoint")
    ref = checkpoints[0].config_hash
    for c in checkpoints[1:]:
        if c.config_hash != ref:
            raise ConfigError(f"checkpoint config mismatch: {c.config_hash} vs {ref}")


def predict(checkpoints, samples, cfg: TrainConfig | None = None, raw=None):
    """Ensemble prediction per query: decode each model, pool, SoftNMS.

    ``raw`` (a dict) receives each model's undeduplicated candidates.
    """
    check_compatible(checkpoints)
    cfg = cfg or checkpoints[0].train_config
    per_model = []
    for k, ck in enumerate(checkpoints):
        preds = model_predictions(ck.model, samples, cfg, source=f"model{k}")
        per_model.append(preds)
        if raw is not None:
            raw[f"model{k}"] = {q: [p.as_list() for p in v] for q, v in preds.items()}
    merged = {}
    for s in samples:
        merged[s.query_id] = ensemble_merge([pm[s.query_id] for pm in per_model], cfg.nms_sigma, cfg.keep)
    return merged


def write_predictions(path, merged):
    rows = [{"query_id": q, "predictions": [p.as_list() for p in preds]} for q, preds in merged.items()]
    write_jsonl(path, rows)


def evaluate_samples(checkpoints, samples, cfg=None):
    from .metrics import evaluate

    merged = predict(checkpoints, samples, cfg)
    preds = {q: [p.as_list() for p in v] for q, v in merged.items()}
    gts = {s.query_id: s.segment for s in samples}
    return evaluate(preds, gts)


# ---------------------------------------------------------------- ablations

ABLATION_ROWS = (
    ("SA+CA", {"object_encoder_variant": "SA+CA"}),
    ("SOA", {"mm_variant": "SOA"}),
    ("w/o ASL", {"asl": "off"}),
    ("ObjectNLQ", {}),
)


def ablate(cfg: TrainConfig, dataset: Dataset, train_splits=("train",), eval_split="val"):
    """Train and score the four ablation variants under one seed.

    Returns a dict with one entry per row label plus the untrained baseline.
    """
    eval_samples = dataset.samples([eval_split])
    rows = {}
    for label, flags in ABLATION_ROWS:
        vcfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **flags))
        ck = train(vcfg, dataset, splits=train_splits)
        report = evaluate_samples([ck], eval_samples, vcfg)
        rows[label] = {"config_hash": ck.config_hash, "flags": flags, "report": report}
        log.info("ablation %s (%s): %s", label, ck.config_hash, report.rounded())
    base_model = GroundingModel(cfg.model, seed=cfg.seed)
    init_object_params_from_text(base_model)
    baseline = evaluate_samples([Checkpoint(base_model, cfg, 0)], eval_samples, cfg)
    return {"rows": rows, "untrained": baseline}


def ablation_table(result):
    from .metrics import format_table

    lines = []
    for label, _ in ABLATION_ROWS:
        r = result["rows"][label]["report"].rounded()
        lines.append((label, [r["r1_03"], r["r1_05"], r["mean_r1"], r["r5_03"], r["r5_05"]]))
    return format_table(lines)
