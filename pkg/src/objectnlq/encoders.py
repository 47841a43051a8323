"""Text, object, multi-modal and multi-scale encoders of the grounding model."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .layers import (
    AttentionSublayer,
    Conv1d,
    FFNSublayer,
    LayerNorm,
    Linear,
    Module,
    parameter,
    sinusoid,
)
from .tensor import Tensor

_CHOICES = {
    "object_branch": ("on", "off"),
    "object_encoder_variant": ("CA", "SA+CA"),
    "mm_variant": ("gated", "SOA"),
    "asl": ("on", "off"),
}


@dataclass
class ModelConfig:
    model_dim: int = 384
    heads: int = 4
    text_blocks: int = 4
    object_blocks: int = 4
    mm_blocks: int = 4
    pyramid_levels: int = 6
    mha_window: int = 9
    ffn_expansion: int = 4
    object_branch: str = "on"
    object_encoder_variant: str = "CA"
    mm_variant: str = "gated"
    asl: str = "on"
    max_object_tokens: int = 512
    object_window: int | None = 1
    objects_per_frame: int = 5
    video_dim: int = 64
    text_dim: int = 32
    object_dim: int = 32
    head_layers: int = 2
    dropout: float = 0.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    reg_weight: float = 1.0
    asl_sigma_floor: float = 0.25
    range_base_steps: float = 4.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if self.mha_window % 2 != 1:
            raise ConfigError(f"mha_window must be odd, got {self.mha_window}")
        for name, allowed in _CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.object_window is not None and (self.object_window < 1 or self.object_window % 2 != 1):
            raise ConfigError(f"object_window must be a positive odd int or null, got {self.object_window}")
        if self.object_blocks > 0 and self.text_blocks < 1:
            raise ConfigError("object parameter init needs at least one text block")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ObjectTokenSequence:
    embeddings: np.ndarray  # (N_o, D_obj)
    frame_index: np.ndarray  # (N_o,) int
    confidence: np.ndarray  # (N_o,)
    class_id: np.ndarray  # (N_o,) int

    def __len__(self):
        return len(self.frame_index)

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class EncoderInputs:
    """A padded batch.  Masks are boolean, True at real positions."""

    video: np.ndarray  # (B, T, D_in)
    video_mask: np.ndarray  # (B, T)
    text: np.ndarray  # (B, L, D_txt)
    text_mask: np.ndarray  # (B, L)
    objects: np.ndarray | None = None  # (B, N, D_obj)
    object_mask: np.ndarray | None = None  # (B, N)
    object_frames: np.ndarray | None = None  # (B, N)
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------- encoders


class TextEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.model_dim
        self.proj = Linear(rng, cfg.text_dim, d)
        self.attn = [AttentionSublayer(rng, d, cfg.heads) for _ in range(cfg.text_blocks)]
        self.ffn = [FFNSublayer(rng, d, cfg.ffn_expansion) for _ in range(cfg.text_blocks)]
        self.norm = LayerNorm(d)


class ObjectEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.model_dim
        self.proj = Linear(rng, cfg.object_dim, d)
        self.cross = [AttentionSublayer(rng, d, cfg.heads) for _ in range(cfg.object_blocks)]
        self.ffn = [FFNSublayer(rng, d, cfg.ffn_expansion) for _ in range(cfg.object_blocks)]
        if cfg.object_encoder_variant == "SA+CA":
            self.self_attn = [AttentionSublayer(rng, d, cfg.heads) for _ in range(cfg.object_blocks)]
        self.norm = LayerNorm(d)


class Branch(Module):
    """Cross-attention from the video stream onto a context sequence, then an FFN."""

    def __init__(self, rng, cfg: ModelConfig):
        self.cross = AttentionSublayer(rng, cfg.model_dim, cfg.heads)
        self.ffn = FFNSublayer(rng, cfg.model_dim, cfg.ffn_expansion)

    def __call__(self, v, ctx, ctx_mask, v_mask, attn_mask=None):
        h = self.cross(v, ctx, q_mask=v_mask, k_mask=ctx_mask, attn_mask=attn_mask)
        return h + self.ffn(h)


class GateMLP(Module):
    def __init__(self, rng, dim):
        self.fc1 = Linear(rng, 2 * dim, dim)
        self.fc2 = Linear(rng, dim, dim)

    def __call__(self, a, b):
        return T.sigmoid(self.fc2(T.gelu(self.fc1(T.concat([a, b], axis=-1)))))


class MMBlock(Module):
    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.model_dim
        self.self_attn = AttentionSublayer(rng, d, cfg.heads)
        self.text_branch = Branch(rng, cfg)
        if cfg.object_branch == "on":
            self.object_branch = Branch(rng, cfg)
            if cfg.mm_variant == "gated":
                self.gate = GateMLP(rng, d)


class PyramidBlock(Module):
    def __init__(self, rng, cfg: ModelConfig, downsample: bool):
        d = cfg.model_dim
        if downsample:
            self.down = Conv1d(rng, d, d, width=3, stride=2)
        self.attn = AttentionSublayer(rng, d, cfg.heads)
        self.ffn = FFNSublayer(rng, d, cfg.ffn_expansion)


# ---------------------------------------------------------------- forward ops


def _masked(x: Tensor, mask) -> Tensor:
    return T.mul(x, Tensor(np.asarray(mask)[..., None], dtype=x.dtype))


def text_encoder_forward(model, text, mask):
    """Encode (B, L, D_txt) query tokens; padded rows come back as zeros."""
    enc = model.text_encoder
    text = T.as_tensor(text)
    if text.shape[1] == 0 or not np.asarray(mask).any(axis=1).all():
        raise DataError("empty text query")
    h = enc.proj(text)
    for attn, ffn in zip(enc.attn, enc.ffn):
        h = h + attn(h, q_mask=mask, k_mask=mask)
        h = h + ffn(h)
    return _masked(enc.norm(h), mask)


def _object_input(model, objects, frames, mask):
    enc = model.object_encoder
    d = model.config.model_dim
    pe = Tensor(sinusoid(frames, d))
    return enc.proj(T.as_tensor(objects)) + pe


def object_encoder_forward(model, objects, frames, obj_mask, text_feat, text_mask):
    """Object tokens attend to the text; no token sees any other token."""
    enc = model.object_encoder
    h = _object_input(model, objects, frames, obj_mask)
    for cross, ffn in zip(enc.cross, enc.ffn):
        h = h + cross(h, text_feat, q_mask=obj_mask, k_mask=text_mask)
        h = h + ffn(h)
    return _masked(enc.norm(h), obj_mask)


def object_encoder_forward_sa_ca(model, objects, frames, obj_mask, text_feat, text_mask):
    """Ablation: self-attention among object tokens before each text cross-attention."""
    enc = model.object_encoder
    h = _object_input(model, objects, frames, obj_mask)
    for sa, cross, ffn in zip(enc.self_attn, enc.cross, enc.ffn):
        h = h + sa(h, q_mask=obj_mask, k_mask=obj_mask)
        h = h + cross(h, text_feat, q_mask=obj_mask, k_mask=text_mask)
        h = h + ffn(h)
    return _masked(enc.norm(h), obj_mask)


def gate_fusion(h_text, h_obj, gate: GateMLP):
    """Elementwise convex blend g*h_text + (1-g)*h_obj with g from the gate MLP.

    Every element lies in the closed interval between the two branch values,
    and a saturated gate returns the selected branch bit-exactly.
    """
    if h_text.shape != h_obj.shape:
        raise ShapeError(f"gate fusion shape mismatch {h_text.shape} vs {h_obj.shape}")
    g = gate(h_text, h_obj)
    return T.blend(h_text, h_obj, g)


def mm_block_forward(model, block: MMBlock, v, text_feat, text_mask, obj_feat, obj_mask, v_mask, obj_attn=None):
    cfg = model.config
    v1 = v + block.self_attn(v, window=cfg.mha_window, q_mask=v_mask, k_mask=v_mask)
    bt = block.text_branch(v1, text_feat, text_mask, v_mask)
    if cfg.object_branch == "off":
        return _masked(v1 + bt, v_mask)
    if obj_feat is None:
        raise DataError("object branch is on but no object features were given")
    bo = block.object_branch(v1, obj_feat, obj_mask, v_mask, obj_attn)
    return _masked(v1 + gate_fusion(bt, bo, block.gate), v_mask)


def mm_block_forward_soa(model, block: MMBlock, v, text_feat, text_mask, obj_feat, obj_mask, v_mask, obj_attn=None):
    """Ablation: self-attention, text cross-attention, object cross-attention, FFN in sequence."""
    cfg = model.config
    if obj_feat is None:
        raise DataError("object branch is on but no object features were given")
    v = v + block.self_attn(v, window=cfg.mha_window, q_mask=v_mask, k_mask=v_mask)
    v = v + block.text_branch.cross(v, text_feat, q_mask=v_mask, k_mask=text_mask)
    v = v + block.object_branch.cross(v, obj_feat, q_mask=v_mask, k_mask=obj_mask, attn_mask=obj_attn)
    v = v + block.text_branch.ffn(v)
    return _masked(v, v_mask)


def multiscale_forward(model, v, mask):
    """Return [(features, mask, stride)] for every pyramid level."""
    cfg = model.config
    T_len = v.shape[1]
    need = 2 ** (cfg.pyramid_levels - 1)
    if T_len < need:
        raise ConfigError(f"sequence length {T_len} is shorter than {need} needed for {cfg.pyramid_levels} pyramid levels")
    mask = np.asarray(mask, dtype=bool)
    out = []
    x = v
    for level, blk in enumerate(model.pyramid):
        if level > 0:
            x = blk.down(_masked(x, mask))
            mask = mask[:, ::2]
            x = _masked(x, mask)
        x = x + blk.attn(x, window=cfg.mha_window, q_mask=mask, k_mask=mask)
        x = _masked(x + blk.ffn(x), mask)
        out.append((x, mask, 2**level))
    return out


def object_context(model, obj_feat, obj_mask, obj_frames, T_len):
    """Append the learned null key and build the video-to-object attention mask.

    With ``object_window`` w, step t sees detections whose frame lies within
    (w - 1) / 2 of t; the null key is visible from every step.
    """
    cfg = model.config
    B = obj_feat.shape[0]
    null = T.mul(model.object_null, Tensor(np.ones((B, 1, 1)), dtype=obj_feat.dtype))
    feats = T.concat([obj_feat, null], axis=1)
    mask = np.concatenate([np.asarray(obj_mask, dtype=bool), np.ones((B, 1), dtype=bool)], axis=1)
    if cfg.object_window is None:
        return feats, mask, None
    half = (cfg.object_window - 1) // 2
    near = np.abs(np.arange(T_len)[None, :, None] - np.asarray(obj_frames)[:, None, :]) <= half
    attn = np.concatenate([near, np.ones((B, T_len, 1), dtype=bool)], axis=2)
    return feats, mask, attn


def encode(model, inputs: EncoderInputs):
    """Run every encoder and return the feature pyramid."""
    cfg = model.config
    text_feat = text_encoder_forward(model, inputs.text, inputs.text_mask)
    obj_feat = None
    if cfg.object_branch == "on":
        if inputs.objects is None:
            raise DataError("object branch is on but the batch carries no objects")
        fwd = object_encoder_forward_sa_ca if cfg.object_encoder_variant == "SA+CA" else object_encoder_forward
        obj_feat = fwd(model, inputs.objects, inputs.object_frames, inputs.object_mask, text_feat, inputs.text_mask)
    B, T_len, _ = inputs.video.shape
    v = model.video_proj(T.as_tensor(inputs.video)) + Tensor(sinusoid(np.arange(T_len), cfg.model_dim))
    v = _masked(v, inputs.video_mask)
    obj_mask = obj_attn = None
    if obj_feat is not None:
        obj_feat, obj_mask, obj_attn = object_context(model, obj_feat, inputs.object_mask, inputs.object_frames, T_len)
    block_fwd = mm_block_forward_soa if (cfg.mm_variant == "SOA" and cfg.object_branch == "on") else mm_block_forward
    for block in model.mm_blocks:
        v = block_fwd(model, block, v, text_feat, inputs.text_mask, obj_feat, obj_mask, inputs.video_mask, obj_attn)
    v = _masked(model.mm_norm(v), inputs.video_mask)
    return multiscale_forward(model, v, inputs.video_mask)


def init_object_params_from_text(model):
    """Seed the object pathway with copies of the matching text-pathway weights.

    Object-encoder block i copies text-encoder block ``i % text_blocks``
    (its self-attention into the cross-attention, and its FFN).  Every
    multi-modal object branch copies the text branch of the same block.
    """
    cfg = model.config
    if cfg.object_branch == "off":
        return model
    te, oe = model.text_encoder, model.object_encoder
    for i in range(cfg.object_blocks):
        j = i % cfg.text_blocks
        oe.cross[i].copy_from(te.attn[j])
        oe.ffn[i].copy_from(te.ffn[j])
    for block in model.mm_blocks:
        block.object_branch.copy_from(block.text_branch)
    return model


class GroundingModel(Module):
    """All parameters of the model; shapes depend on the config alone."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        from .heads import AslParams, PredictionHeads

        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.model_dim
        self.text_encoder = TextEncoder(rng, config)
        if config.object_branch == "on":
            self.object_encoder = ObjectEncoder(rng, config)
            self.object_null = parameter(rng.standard_normal((1, 1, d)) * 0.02)
        self.video_proj = Linear(rng, config.video_dim, d)
        self.mm_blocks = [MMBlock(rng, config) for _ in range(config.mm_blocks)]
        self.mm_norm = LayerNorm(d)
        self.pyramid = [PyramidBlock(rng, config, downsample=l > 0) for l in range(config.pyramid_levels)]
        self.heads = PredictionHeads(rng, config)
        self.asl = AslParams(config.pyramid_levels)

    def state(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise DataError(f"checkpoint parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DataError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())
