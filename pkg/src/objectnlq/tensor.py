"""A small reverse-mode differentiation engine on top of numpy.

Every op builds its output eagerly and records a closure that maps the
output gradient to parent gradients.  ``Tensor.backward`` walks the graph
in reverse topological order.  Data is float32 unless ``precision`` selects
float64 (used by the gradient checker).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad", True)


def default_dtype():
    return np.dtype(_dtype())


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` ("float32" or "float64") inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = _dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype())
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add onto whatever is already stored, so call ``zero_grad``
    (or the optimizer's) between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _coerce(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a, dtype=b.data.dtype if isinstance(b, Tensor) else None)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.data.dtype)
    return a, b


def add(a, b):
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _coerce(a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def maximum(a, b):
    a, b = _coerce(a, b)
    pick = a.data >= b.data

    def bw(g):
        return _unbroadcast(np.where(pick, g, 0.0), a.shape), _unbroadcast(np.where(pick, 0.0, g), b.shape)

    return _make(np.where(pick, a.data, b.data), (a, b), bw, "maximum")


def blend(a, b, g):
    """g*a + (1-g)*b for g in [0, 1], pinned into [min(a,b), max(a,b)].

    The pin only absorbs rounding, so equal inputs and saturated gates give
    exact results; gradients are those of the plain convex combination.
    """
    a, b = _coerce(a, b)
    g = as_tensor(g)
    raw = g.data * a.data + (1.0 - g.data) * b.data
    out = np.clip(raw, np.minimum(a.data, b.data), np.maximum(a.data, b.data)).astype(raw.dtype)

    def bw(grad):
        return (
            _unbroadcast(grad * g.data, a.shape),
            _unbroadcast(grad * (1.0 - g.data), b.shape),
            _unbroadcast(grad * (a.data - b.data), g.shape),
        )

    return _make(out, (a, b, g), bw, "blend")


def minimum(a, b):
    a, b = _coerce(a, b)
    pick = a.data <= b.data

    def bw(g):
        return _unbroadcast(np.where(pick, g, 0.0), a.shape), _unbroadcast(np.where(pick, 0.0, g), b.shape)

    return _make(np.where(pick, a.data, b.data), (a, b), bw, "minimum")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x):
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid_np(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out.astype(z.dtype), (x,), lambda g: (g * _sigmoid_np(z),), "softplus")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _SQRT_HALF))
    out = (z * cdf).astype(z.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return (g * (cdf + z * pdf),)

    return _make(out, (x,), bw, "gelu")


_POINTWISE = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid}


def pointwise(x, kind: str):
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ------------------------------------------------------------------ reductions


def tsum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx):
    out = x.data[idx]

    key = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in key)

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis=-1):
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, xs, bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalization


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get weight exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax over a fully masked row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None):
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.dtype))


# ---------------------------------------------------------------- convolution


def conv1d(x, kernel, bias=None, stride: int = 1):
    """Temporal convolution with "same" zero padding.

    ``x`` is (..., T, C) and ``kernel`` is (K, C, C') with K odd.  Output
    row j is centred on input row ``j * stride`` and has length ceil(T/stride).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    K, cin, cout = kernel.shape
    if K % 2 != 1:
        raise ShapeError("conv1d kernel width must be odd")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    T = x.shape[-2]
    t_out = -(-T // stride)
    half = (K - 1) // 2
    span = stride * (t_out - 1) + 1
    right = max(0, span + K - 1 - half - T)
    pad = [(0, 0)] * (x.ndim - 2) + [(half, right), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    taps = [xp[..., k : k + span : stride, :] for k in range(K)]
    out = np.matmul(taps[0], w[0])
    for k in range(1, K):
        out = out + np.matmul(taps[k], w[k])
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k : k + span : stride, :] += np.matmul(g, w[k].T)
            gx = gxp[..., half : half + T, :]
        if kernel.requires_grad:
            g2 = g.reshape(-1, cout)
            gk = np.stack([taps[k].reshape(-1, cin).T @ g2 for k in range(K)])
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, cout).sum(axis=0)

    return _make(out, parents, bw, "conv1d")


# ---------------------------------------------------------------- attention


def band_mask(length: int, window: int | None) -> np.ndarray:
    """Boolean (L, L) mask allowing |i - j| <= (window - 1) / 2."""
    if window is None:
        return np.ones((length, length), dtype=bool)
    if window % 2 != 1:
        raise ValueError("attention window must be odd")
    idx = np.arange(length)
    return np.abs(idx[:, None] - idx[None, :]) <= (window - 1) // 2


def multi_head_attention(q, k, v, params, heads: int, window=None, q_mask=None, k_mask=None, attn_mask=None):
    """Scaled dot-product attention over ``heads`` heads.

    q is (B, Lq, D); k and v are (B, Lk, D).  ``params`` maps wq, bq, wk, bk,
    wv, bv, wo, bo to tensors.  ``window`` restricts self-attention to a band
    and requires Lq == Lk.  ``q_mask``/``k_mask`` are boolean (B, L) arrays;
    ``attn_mask`` is an optional boolean (B, Lq, Lk) array.
    """
    B, Lq, D = q.shape
    Lk = k.shape[1]
    if D % heads != 0:
        from .errors import ConfigError

        raise ConfigError(f"model dim {D} not divisible by {heads} heads")
    dh = D // heads

    def split(t, L):
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    qh = split(linear(q, params["wq"], params["bq"]), Lq)
    kh = split(linear(k, params["wk"], params["bk"]), Lk)
    vh = split(linear(v, params["wv"], params["bv"]), Lk)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))

    mask = np.ones((B, Lq, Lk), dtype=bool)
    if k_mask is not None:
        mask &= np.asarray(k_mask, dtype=bool)[:, None, :]
    if window is not None:
        if Lq != Lk:
            raise ShapeError("windowed attention needs a shared query/key sequence")
        mask &= band_mask(Lq, window)[None]
    if attn_mask is not None:
        mask &= np.asarray(attn_mask, dtype=bool)
    if q_mask is not None:
        # padded queries attend anywhere; their outputs are discarded downstream
        mask |= ~np.asarray(q_mask, dtype=bool)[:, :, None]
    attn = softmax(scores, axis=-1, mask=mask[:, None])
    ctx = matmul(attn, vh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Lq, D))
    return linear(ctx, params["wo"], params["bo"])


def grad_values(fn: Callable[[], Tensor], tensors: Iterable[Tensor]):
    """Run ``fn``, backpropagate, return the gradients of ``tensors`` (zeroed first)."""
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    backward(fn())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
