"""Parameter containers built on the tensor engine."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Attribute-registered parameters and submodules, in insertion order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{key}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def copy_from(self, other: "Module"):
        """Deep-copy parameter values from a module with an identical layout."""
        mine = list(self.named_parameters())
        theirs = list(other.named_parameters())
        if [n for n, _ in mine] != [n for n, _ in theirs]:
            raise ValueError("parameter layouts differ")
        for (_, dst), (_, src) in zip(mine, theirs):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch {dst.shape} vs {src.shape}")
            dst.data = src.data.copy()


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        self.weight = parameter(_uniform(rng, d_in, (d_in, d_out)) * math.sqrt(3.0))
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, rng, d_in, d_out, width=3, stride=1):
        self.kernel = parameter(_uniform(rng, d_in * width, (width, d_in, d_out)) * math.sqrt(3.0))
        self.bias = parameter(np.zeros(d_out))
        self.stride = stride

    def __call__(self, x):
        return T.conv1d(x, self.kernel, self.bias, self.stride)


class Attention(Module):
    """Multi-head attention with its four projections."""

    def __init__(self, rng, dim, heads):
        self.heads = heads
        self.params = {}
        for name in ("q", "k", "v", "o"):
            self.params["w" + name] = parameter(_uniform(rng, dim, (dim, dim)) * math.sqrt(3.0))
            self.params["b" + name] = parameter(np.zeros(dim))

    def __call__(self, q, k, v, window=None, q_mask=None, k_mask=None, attn_mask=None):
        return T.multi_head_attention(
            q, k, v, self.params, self.heads, window=window, q_mask=q_mask, k_mask=k_mask, attn_mask=attn_mask
        )


class FeedForward(Module):
    def __init__(self, rng, dim, expansion):
        self.fc1 = Linear(rng, dim, dim * expansion)
        self.fc2 = Linear(rng, dim * expansion, dim)

    def __call__(self, x, dropout=0.0, rng=None):
        h = T.gelu(self.fc1(x))
        return self.fc2(T.dropout(h, dropout, rng))


class AttentionSublayer(Module):
    """Pre-norm attention: ``norm`` is applied to the query stream only."""

    def __init__(self, rng, dim, heads):
        self.norm = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)

    def __call__(self, x, kv=None, **kw):
        h = self.norm(x)
        if kv is None:
            return self.attn(h, h, h, **kw)
        return self.attn(h, kv, kv, **kw)


class FFNSublayer(Module):
    def __init__(self, rng, dim, expansion):
        self.norm = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, expansion)

    def __call__(self, x):
        return self.ffn(self.norm(x))


def sinusoid(positions, dim):
    """Standard sine/cosine encoding of (possibly fractional) positions."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(dim // 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * 2.0 * i / dim)
    ang = pos * freq
    out = np.zeros(pos.shape[:-1] + (dim,))
    out[..., 0 : 2 * len(i) : 2] = np.sin(ang)
    out[..., 1 : 2 * len(i) : 2] = np.cos(ang)
    return out
