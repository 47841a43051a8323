"""Feature/annotation/object file formats, fold splitting and the synthetic benchmark."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncoderInputs, ObjectTokenSequence
from .errors import DataError, FormatError

FMX_MAGIC = b"FMX1"
_HEADER = struct.Struct("<4sII")

# ---------------------------------------------------------------- .fmx matrices


def write_fmx(path, matrix):
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if m.ndim != 2:
        raise ValueError(f"fmx holds 2-D matrices, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FMX_MAGIC, m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def encode_fmx(matrix) -> bytes:
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    return _HEADER.pack(FMX_MAGIC, m.shape[0], m.shape[1]) + m.tobytes()


def decode_fmx(buf: bytes, path="<buffer>", offset: int = 0):
    """Parse one matrix starting at ``offset``; return (matrix, next_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError(path, len(buf), f"truncated header: need {_HEADER.size} bytes at offset {offset}")
    magic, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != FMX_MAGIC:
        raise FormatError(path, offset, f"bad magic {magic!r}, expected {FMX_MAGIC!r}")
    start = offset + _HEADER.size
    nbytes = rows * cols * 4
    if len(buf) - start < nbytes:
        raise FormatError(path, len(buf), f"truncated payload: header declares {rows}x{cols} ({nbytes} bytes), {len(buf) - start} available")
    m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start).reshape(rows, cols)
    bad = ~np.isfinite(m)
    if bad.any():
        first = int(np.flatnonzero(bad.reshape(-1))[0])
        raise FormatError(path, start + 4 * first, "non-finite value")
    return m.astype(np.float32), start + nbytes


def read_fmx(path):
    buf = Path(path).read_bytes()
    m, end = decode_fmx(buf, path)
    if end != len(buf):
        raise FormatError(path, end, f"{len(buf) - end} trailing bytes after payload")
    return m


# ---------------------------------------------------------------- typed records


@dataclass
class VideoFeatureSequence:
    video_id: str
    features: np.ndarray  # (T, D_in)
    base_stride_s: float
    duration_s: float

    def __post_init__(self):
        T = self.features.shape[0]
        if abs(T * self.base_stride_s - self.duration_s) > self.base_stride_s + 1e-9:
            raise DataError(
                f"video {self.video_id}: {T} steps of {self.base_stride_s}s do not match duration {self.duration_s}s"
            )


def load_feature_file(path, video_id=None, base_stride_s=1.0, duration_s=None):
    feats = read_fmx(path)
    if duration_s is None:
        duration_s = feats.shape[0] * base_stride_s
    return VideoFeatureSequence(video_id or Path(path).stem, feats, float(base_stride_s), float(duration_s))


def concat_feature_streams(a: VideoFeatureSequence, b: VideoFeatureSequence):
    """Join two feature streams of one video along the channel axis (a first)."""
    if a.video_id != b.video_id:
        raise DataError(f"cannot join streams of different videos {a.video_id!r} / {b.video_id!r}")
    if a.features.shape[0] != b.features.shape[0]:
        raise DataError(f"stream alignment error for {a.video_id}: {a.features.shape[0]} vs {b.features.shape[0]} steps")
    feats = np.concatenate([a.features, b.features], axis=1)
    return VideoFeatureSequence(a.video_id, feats, a.base_stride_s, a.duration_s)


@dataclass
class QueryAnnotation:
    query_id: str
    video_id: str
    text_emb: np.ndarray
    gt_segment: tuple
    duration_s: float
    object_ref: str | None = None


def read_jsonl(path):
    path = Path(path)
    rows = []
    offset = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if line:
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(path, offset + exc.pos, f"line {lineno}: {exc.msg}") from None
            offset += len(raw)
    return rows


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_annotations(path, root=None):
    """Parse an annotation .jsonl; relative paths resolve against ``root``."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    out = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            s, e = map(float, row["segment"])
            ann = QueryAnnotation(
                query_id=str(row["query_id"]),
                video_id=str(row["video_id"]),
                text_emb=read_fmx(root / row["text_emb"]),
                gt_segment=(s, e),
                duration_s=float(row["duration_s"]),
                object_ref=str(root / row["objects"]) if row.get("objects") else None,
            )
        except KeyError as exc:
            raise DataError(f"{path}: record {i + 1} lacks field {exc.args[0]!r}") from None
        if not 0 <= s < e <= ann.duration_s + 1e-9:
            raise DataError(f"{path}: query {ann.query_id} has invalid segment ({s}, {e}) for duration {ann.duration_s}")
        out.append(ann)
    return out


# ---------------------------------------------------------------- objects


def select_detections(dets, per_frame: int, cap: int):
    """Top ``per_frame`` detections per frame, then the ``cap`` most confident overall.

    ``dets`` is a list of (frame, class_id, score).  Ordering is confidence
    descending with ties broken by (frame, class_id) ascending.
    """
    key = lambda d: (-d[2], d[0], d[1])
    by_frame = {}
    for d in dets:
        by_frame.setdefault(d[0], []).append(d)
    kept = []
    for frame in sorted(by_frame):
        kept.extend(sorted(by_frame[frame], key=key)[:per_frame])
    return sorted(kept, key=key)[:cap]


def load_objects(path, class_table, per_frame: int = 5, cap: int = 512, n_frames=None):
    rows = read_jsonl(path)
    dets = []
    for i, row in enumerate(rows):
        try:
            dets.append((int(row["t"]), int(row["class_id"]), float(row["score"])))
        except KeyError as exc:
            raise DataError(f"{path}: detection {i + 1} lacks field {exc.args[0]!r}") from None
    unknown = sorted({c for _, c, _ in dets if not 0 <= c < class_table.shape[0]})
    if unknown:
        raise DataError(f"{path}: unknown class ids {unknown}")
    if n_frames is not None:
        outside = sorted({t for t, _, _ in dets if not 0 <= t < n_frames})
        if outside:
            raise DataError(f"{path}: frame indices outside clip of {n_frames} steps: {outside[:10]}")
    for t, c, s in dets:
        if not 0.0 <= s <= 1.0:
            raise DataError(f"{path}: confidence {s} outside [0, 1]")
    chosen = select_detections(dets, per_frame, cap)
    if not chosen:
        return ObjectTokenSequence.empty(class_table.shape[1])
    frames = np.array([d[0] for d in chosen], dtype=np.int64)
    classes = np.array([d[1] for d in chosen], dtype=np.int64)
    return ObjectTokenSequence(
        embeddings=class_table[classes],
        frame_index=frames,
        confidence=np.array([d[2] for d in chosen]),
        class_id=classes,
    )


# ---------------------------------------------------------------- folds

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class FoldSplit:
    n_folds: int
    assignment: dict

    def fold_of(self, video_id):
        return self.assignment[video_id]

    def members(self, fold):
        return sorted(v for v, f in self.assignment.items() if f == fold)

    def sizes(self):
        return [sum(1 for f in self.assignment.values() if f == k) for k in range(self.n_folds)]


def make_folds(video_ids, seed: int, n_folds: int = 5):
    """fold = FNV-1a-64(utf8(video_id) + utf8(str(seed))) mod n_folds."""
    ids = list(dict.fromkeys(video_ids))
    if not ids:
        raise DataError("cannot split an empty id list")
    return FoldSplit(n_folds, {v: fnv1a64(f"{v}{seed}".encode()) % n_folds for v in ids})


# ---------------------------------------------------------------- datasets


@dataclass
class Sample:
    query_id: str
    video_id: str
    video: np.ndarray
    text: np.ndarray
    objects: ObjectTokenSequence | None
    segment: tuple
    duration_s: float
    base_stride_s: float


@dataclass
class Dataset:
    root: Path
    manifest: dict
    splits: dict = field(default_factory=dict)

    def samples(self, split_names):
        out = []
        for name in split_names:
            out.extend(self.splits[name])
        return out

    def video_ids(self, split_names=None):
        names = split_names or list(self.splits)
        return sorted({s.video_id for s in self.samples(names)})


def load_dataset(root, splits=None, per_frame: int = 5, cap: int = 512, with_objects: bool = True):
    """Load a dataset directory described by ``dataset.json``."""
    root = Path(root)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise DataError(f"{root}: missing dataset.json manifest")
    manifest = json.loads(manifest_path.read_text())
    stride = float(manifest["base_stride_s"])
    class_table = read_fmx(root / manifest["class_table"]) if with_objects and manifest.get("class_table") else None
    videos: dict = {}
    ds = Dataset(root, manifest)
    for name, rel in manifest["annotations"].items():
        if splits is not None and name not in splits:
            continue
        items = []
        for ann in load_annotations(root / rel, root):
            if ann.video_id not in videos:
                streams = [
                    load_feature_file(root / d / f"{ann.video_id}.fmx", ann.video_id, stride, ann.duration_s)
                    for d in manifest["feature_dirs"]
                ]
                seq = streams[0]
                for other in streams[1:]:
                    seq = concat_feature_streams(seq, other)
                videos[ann.video_id] = seq
            seq = videos[ann.video_id]
            objs = None
            if class_table is not None and ann.object_ref:
                objs = load_objects(ann.object_ref, class_table, per_frame, cap, n_frames=seq.features.shape[0])
            items.append(
                Sample(ann.query_id, ann.video_id, seq.features, ann.text_emb, objs, ann.gt_segment, ann.duration_s, stride)
            )
        ds.splits[name] = items
    return ds


def collate(samples, with_objects: bool = True, object_dim=None):
    """Pad a list of samples into one EncoderInputs batch.

    A query without any object token gets one zero-embedding token so that
    attention always has a valid key.
    """
    B = len(samples)
    t_max = max(s.video.shape[0] for s in samples)
    l_max = max(s.text.shape[0] for s in samples)
    dv, dt = samples[0].video.shape[1], samples[0].text.shape[1]
    video = np.zeros((B, t_max, dv), dtype=np.float32)
    vmask = np.zeros((B, t_max), dtype=bool)
    text = np.zeros((B, l_max, dt), dtype=np.float32)
    tmask = np.zeros((B, l_max), dtype=bool)
    for i, s in enumerate(samples):
        video[i, : len(s.video)] = s.video
        vmask[i, : len(s.video)] = True
        text[i, : len(s.text)] = s.text
        tmask[i, : len(s.text)] = True
    inputs = EncoderInputs(video, vmask, text, tmask)
    if with_objects:
        if any(s.objects is None for s in samples):
            missing = [s.query_id for s in samples if s.objects is None]
            raise DataError(f"object branch is on but objects are missing for queries {missing}")
        do = object_dim or samples[0].objects.embeddings.shape[1]
        n_max = max(1, max(len(s.objects) for s in samples))
        objs = np.zeros((B, n_max, do), dtype=np.float32)
        omask = np.zeros((B, n_max), dtype=bool)
        frames = np.zeros((B, n_max), dtype=np.int64)
        for i, s in enumerate(samples):
            n = len(s.objects)
            if n == 0:
                omask[i, 0] = True
                continue
            objs[i, :n] = s.objects.embeddings
            omask[i, :n] = True
            frames[i, :n] = s.objects.frame_index
        inputs.objects, inputs.object_mask, inputs.object_frames = objs, omask, frames
    return inputs


# ---------------------------------------------------------------- synthetic benchmark


@dataclass
class SynthParams:
    n_videos: int = 20
    T: int = 256
    D_in: int = 64
    vocab_size: int = 32
    seed: int = 42
    n_train: int = 200
    n_eval: int = 50
    text_dim: int = 32
    text_len: int = 6
    base_stride_s: float = 16 / 30
    min_len: int = 8
    max_len: int = 40
    distractor_rate: float = 1.0
    stream_dims: tuple = ()


def segment_prior(T: int, min_len: int, max_len: int):
    """Every (start_step, length) the generator can draw, with its probability.

    Lengths are uniform on [min_len, max_len]; the start is then uniform.
    """
    pairs, probs = [], []
    n_lengths = max_len - min_len + 1
    for n in range(min_len, max_len + 1):
        for a in range(0, T - n + 1):
            pairs.append((a, n))
            probs.append(1.0 / (n_lengths * (T - n + 1)))
    return pairs, np.array(probs)


def _draw_segment(rng, p: SynthParams):
    n = int(rng.integers(p.min_len, p.max_len + 1))
    a = int(rng.integers(0, p.T - n + 1))
    return a, n


def synth_generate(out_dir, n_videos=20, T=256, D_in=64, vocab_size=32, seed=42, **kw):
    """Write an object-keyed localisation dataset to ``out_dir``.

    Video features are pure noise.  Each query names one object class
    through its text embedding; that class is detected in every step of the
    ground-truth interval and nowhere else.  Other classes are sprinkled
    uniformly as distractors.
    """
    p = SynthParams(n_videos=n_videos, T=T, D_in=D_in, vocab_size=vocab_size, seed=seed, **kw)
    if p.T < 64:
        raise DataError("synthetic videos need T >= 64")
    if p.vocab_size < 2:
        raise DataError("need at least two object classes")
    out = Path(out_dir)
    rng = np.random.default_rng(p.seed)
    streams = list(p.stream_dims) or [p.D_in - p.D_in // 3, p.D_in // 3]
    if sum(streams) != p.D_in:
        raise DataError(f"stream dims {streams} do not add up to D_in={p.D_in}")
    dirs = [f"video_stream{i}" for i in range(len(streams))]
    for d in dirs + ["text", "objects"]:
        (out / d).mkdir(parents=True, exist_ok=True)

    classes = rng.standard_normal((p.vocab_size, p.text_dim))
    classes /= np.linalg.norm(classes, axis=1, keepdims=True)
    write_fmx(out / "classes.fmx", classes)
    fillers = rng.standard_normal((8, p.text_dim))
    fillers /= np.linalg.norm(fillers, axis=1, keepdims=True)

    duration = p.T * p.base_stride_s
    video_ids = [f"vid{i:03d}" for i in range(p.n_videos)]
    for vid in video_ids:
        feats = rng.standard_normal((p.T, p.D_in))
        col = 0
        for d, width in zip(dirs, streams):
            write_fmx(out / d / f"{vid}.fmx", feats[:, col : col + width])
            col += width

    splits = {"train": p.n_train, "val": p.n_eval}
    annotations = {}
    qn = 0
    for split, count in splits.items():
        rows = []
        for _ in range(count):
            qid = f"q{qn:05d}"
            qn += 1
            vid = video_ids[int(rng.integers(p.n_videos))]
            target = int(rng.integers(p.vocab_size))
            a, n = _draw_segment(rng, p)
            text = fillers[rng.integers(0, len(fillers), size=p.text_len)].copy()
            text[int(rng.integers(p.text_len))] = classes[target]
            text += 0.05 * rng.standard_normal(text.shape)
            write_fmx(out / "text" / f"{qid}.fmx", text)

            dets = []
            for t in range(p.T):
                for _ in range(int(rng.poisson(p.distractor_rate))):
                    c = int(rng.integers(p.vocab_size - 1))
                    c = c + 1 if c >= target else c
                    dets.append({"t": t, "class_id": c, "score": round(float(rng.uniform(0.3, 0.95)), 4)})
                if a <= t < a + n:
                    dets.append({"t": t, "class_id": target, "score": round(float(rng.uniform(0.5, 1.0)), 4)})
            write_jsonl(out / "objects" / f"{qid}.jsonl", dets)
            rows.append(
                {
                    "query_id": qid,
                    "video_id": vid,
                    "text_emb": f"text/{qid}.fmx",
                    "segment": [a * p.base_stride_s, (a + n) * p.base_stride_s],
                    "duration_s": duration,
                    "objects": f"objects/{qid}.jsonl",
                    "target_class": target,
                }
            )
        write_jsonl(out / f"{split}.jsonl", rows)
        annotations[split] = f"{split}.jsonl"

    manifest = {
        "generator": "objectnlq.synth",
        "seed": p.seed,
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(p).items()},
        "base_stride_s": p.base_stride_s,
        "feature_dirs": dirs,
        "class_table": "classes.fmx",
        "annotations": annotations,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def best_blind_recall(T: int, min_len: int, max_len: int, thr: float = 0.5):
    """Highest R@1 any localiser can reach without seeing the object files.

    Features are independent of the ground truth, so the best blind rule is a
    fixed interval; enumerate every grid interval and score it against the
    exact generator prior.  Returns (rate, (start_step, end_step)).
    """
    pairs, probs = segment_prior(T, min_len, max_len)
    prior = np.array(pairs, dtype=float)
    gs, ge = prior[:, 0], prior[:, 0] + prior[:, 1]
    best, best_seg = 0.0, None
    for n in range(1, T + 1):
        for a in range(0, T - n + 1):
            inter = np.clip(np.minimum(a + n, ge) - np.maximum(a, gs), 0, None)
            iou = inter / (n + (ge - gs) - inter)
            rate = float(np.sum(probs[iou >= thr]))
            if rate > best:
                best, best_seg = rate, (a, a + n)
    return best, best_seg
