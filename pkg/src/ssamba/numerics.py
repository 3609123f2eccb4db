"""Dense float32 arrays with a small tape-based reverse mode.

Every differentiable operation used by the encoder lives here (plus the
selective scan in :mod:`ssamba.ssm`, which registers itself through
:func:`record`).  Ops keep the dtype of their inputs, so the same graph can
be evaluated in float64 for finite-difference checks.  Reductions and matrix
products accumulate in float64 and round back.
"""

from __future__ import annotations

import contextlib
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT = np.float32
ACC = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


# --------------------------------------------------------------------------
# Tensor

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(FLOAT)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(FLOAT)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=FLOAT), requires_grad=True, name=name)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


# --------------------------------------------------------------------------
# Tape

@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class GradTape:
    """Append-only record of differentiable ops.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients are recorded.  ``backward`` replays the record in
    exact reverse order.
    """

    def __init__(self):
        self.ops: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, params: dict[str, Tensor] | Iterable[Tensor]) -> None:
        if isinstance(params, dict):
            items = params.items()
        else:
            items = ((p.name or f"param{i}", p) for i, p in enumerate(params))
        for name, p in items:
            p.requires_grad = True
            self.params[name] = p

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


_TAPES: list[GradTape] = []


def active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def record(name: str, out_data: np.ndarray, inputs: Sequence, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape.

    ``backward_fn(g)`` returns one gradient (or None) per entry of ``inputs``.
    Non-Tensor inputs are treated as constants.
    """
    _count(name, out_data.size)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_Node(out, tuple(inputs), backward_fn, name))
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse pass; returns gradients of every watched parameter by name.

    Also stores each gradient on ``param.grad``.  Parameters the loss does not
    depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.ops):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves keep their entries (non-leaf entries were popped above)
    result = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        p.grad = g
        result[name] = g
    return result


# --------------------------------------------------------------------------
# Op counter: a coarse work estimate per op, used to verify linear scaling.

class OpCounter:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_COUNTERS: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _count(name: str, work: int) -> None:
    for c in _COUNTERS:
        c.counts[name] += int(work)


def add_work(name: str, work: int) -> None:
    """Charge extra work to the active counters (for ops whose cost exceeds output size)."""
    _count(name, work)


# --------------------------------------------------------------------------
# Helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _shape_of(x) -> tuple[int, ...]:
    return np.shape(_data(x))


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# Elementwise

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = ad.shape, bd.shape
    return record("add", ad + bd, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = ad.shape, bd.shape
    return record("sub", ad - bd, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    ad = _data(a)
    c = ad.dtype.type(c)
    return record("scale", ad * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = _data(a)
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the matching form per sign
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    s = _sigmoid(_data(a))
    return record("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def silu(a) -> Tensor:
    x = _data(a)
    s = _sigmoid(x)
    return record("silu", x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    x = _data(a)
    return record("softplus", _softplus(x), (a,), lambda g: (g * _sigmoid(x),))


def relu(a) -> Tensor:
    x = _data(a)
    mask = x > 0
    return record("relu", np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation."""
    x = _data(a)
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bwd(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t**2) * dinner),)

    return record("gelu", out.astype(x.dtype), (a,), bwd)


# --------------------------------------------------------------------------
# Shape and reduction

def reshape(a, shape) -> Tensor:
    ad = _data(a)
    old = ad.shape
    return record("reshape", ad.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    ad = _data(a)
    axes = tuple(reversed(range(ad.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(ad, axes), (a,), lambda g: (np.transpose(g, inv),))


def flip(a, axis: int) -> Tensor:
    ad = _data(a)
    return record("flip", np.flip(ad, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def narrow(a, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    ad = _data(a)
    index = [slice(None)] * ad.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bwd(g):
        full = np.zeros(ad.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record("narrow", ad[index], (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    out = np.sum(ad, axis=axis, keepdims=keepdims, dtype=ACC).astype(ad.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).astype(ad.dtype),)

    return record("sum", np.asarray(out), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    n = ad.size if axis is None else int(np.prod([ad.shape[i] for i in np.atleast_1d(axis)]))
    out = np.mean(ad, axis=axis, keepdims=keepdims, dtype=ACC).astype(ad.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, ad.shape) / n).astype(ad.dtype),)

    return record("mean", np.asarray(out), (a,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return record("concat", np.concatenate(datas, axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows along the sequence axis.

    ``a`` is (M, D) with ``idx`` (m,), or (B, M, D) with ``idx`` (B, m).
    """
    ad = _data(a)
    idx = np.asarray(idx, dtype=np.int64)
    if ad.ndim == 2:
        out = ad[idx]
    else:
        out = np.take_along_axis(ad, idx[..., None], axis=1)

    def bwd(g):
        ga = np.zeros_like(ad)
        if ad.ndim == 2:
            np.add.at(ga, idx, g)
        else:
            for b in range(ad.shape[0]):
                np.add.at(ga[b], idx[b], g[b])
        return (ga,)

    return record("take_rows", out, (a,), bwd)


def pick(a, idx: np.ndarray) -> Tensor:
    """``out[..., i] = a[..., i, idx[..., i]]`` for a (..., N, K) array."""
    ad = _data(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(ad, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return record("pick", out, (a,), bwd)


# --------------------------------------------------------------------------
# Linear algebra

def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dims disagree, {ad.shape} @ {bd.shape}")
    dt = _result_dtype(ad, bd)
    out = np.matmul(ad.astype(ACC), bd.astype(ACC)).astype(dt)
    k = ad.shape[-1]
    add_work("matmul", out.size * (k - 1))

    def bwd(g):
        g64 = g.astype(ACC)
        if bd.ndim == 1:
            ga = np.multiply.outer(g64, bd.astype(ACC))
            gb = np.einsum("...i,...ij->j", g64, ad.astype(ACC)) if ad.ndim > 1 else g64 * ad
        else:
            ga = np.matmul(g64, np.swapaxes(bd.astype(ACC), -1, -2))
            gb = np.matmul(np.swapaxes(ad.astype(ACC), -1, -2), g64) if ad.ndim > 1 \
                else np.multiply.outer(ad.astype(ACC), g64)
        return (_unbroadcast(ga, ad.shape).astype(ad.dtype),
                _unbroadcast(gb, bd.shape).astype(bd.dtype))

    return record("matmul", out, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def depthwise_conv1d(x, w, bias=None) -> Tensor:
    """Causal per-channel convolution along the sequence axis.

    ``x`` is (M, C) or (B, M, C); ``w`` is (C, k).  The input is left-padded
    with k-1 zeros so the output has the input's length, and
    ``out[t, c] = sum_j w[c, j] * x[t - (k-1) + j, c]``.
    """
    xd, wd = _data(x), _data(w)
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"conv1d: channels {xd.shape[-1]} vs kernel {wd.shape}")
    k = wd.shape[1]
    if k < 1:
        raise ContractError("kernel width must be >= 1")
    M = xd.shape[-2]
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(xd, pad)
    dt = _result_dtype(xd, wd)
    out = np.zeros(xd.shape, dtype=ACC)
    for j in range(k):
        out += xp[..., j:j + M, :] * wd[:, j].astype(ACC)
    out = out.astype(dt)
    if bias is not None:
        out = out + _data(bias)
    add_work("conv1d", xd.size * (k - 1))

    def bwd(g):
        g64 = g.astype(ACC)
        gxp = np.zeros(xp.shape, dtype=ACC)
        gw = np.empty(wd.shape, dtype=ACC)
        for j in range(k):
            gxp[..., j:j + M, :] += g64 * wd[:, j]
            gw[:, j] = (g64 * xp[..., j:j + M, :]).reshape(-1, wd.shape[0]).sum(axis=0)
        gx = gxp[..., k - 1:, :].astype(xd.dtype)
        gb = None if bias is None else g64.reshape(-1, wd.shape[0]).sum(axis=0).astype(g.dtype)
        return gx, gw.astype(wd.dtype), gb

    return record("conv1d", out, (x, w, bias), bwd)


def rms_norm(x, g, eps: float = 1e-5) -> Tensor:
    xd, gd = _data(x), _data(g)
    if xd.shape[-1] != gd.shape[-1]:
        raise DimensionError(f"rms_norm: gain {gd.shape} vs features {xd.shape[-1]}")
    x64 = xd.astype(ACC)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    xhat = x64 * inv
    out = (xhat * gd).astype(xd.dtype)
    D = xd.shape[-1]

    def bwd(gr):
        g64 = gr.astype(ACC)
        gxhat = g64 * gd
        gx = inv * (gxhat - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True) / D)
        gg = (g64 * xhat).reshape(-1, D).sum(axis=0)
        return gx.astype(xd.dtype), gg.astype(gd.dtype)

    return record("rms_norm", out, (x, g), bwd)


def layer_norm(x, g, b=None, eps: float = 1e-5) -> Tensor:
    xd, gd = _data(x), _data(g)
    if xd.shape[-1] != gd.shape[-1]:
        raise DimensionError(f"layer_norm: gain {gd.shape} vs features {xd.shape[-1]}")
    x64 = xd.astype(ACC)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd
    if b is not None:
        out = out + _data(b)
    D = xd.shape[-1]

    def bwd(gr):
        g64 = gr.astype(ACC)
        gxhat = g64 * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        gg = (g64 * xhat).reshape(-1, D).sum(axis=0)
        gb = None if b is None else g64.reshape(-1, D).sum(axis=0).astype(gd.dtype)
        return gx.astype(xd.dtype), gg.astype(gd.dtype), gb

    return record("layer_norm", out.astype(xd.dtype), (x, g, b), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = _data(a).astype(ACC)
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bwd(g):
        g64 = g.astype(ACC)
        return ((g64 - p * g64.sum(axis=axis, keepdims=True)).astype(g.dtype),)

    return record("log_softmax", out.astype(_data(a).dtype), (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    x = _data(a)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record("softmax", p, (a,), bwd)


def replace_rows(a, idx: np.ndarray, row) -> Tensor:
    """Return ``a`` with the rows listed in ``idx`` set to the vector ``row``.

    ``a`` is (M, D) with ``idx`` (m,), or (B, M, D) with ``idx`` (B, m).
    Untouched rows are bit-identical copies of the input.
    """
    ad, rd = _data(a), _data(row)
    idx = np.asarray(idx, dtype=np.int64)
    out = ad.copy()
    mask = np.zeros(ad.shape[:-1], dtype=bool)
    if ad.ndim == 2:
        mask[idx] = True
    else:
        np.put_along_axis(mask, idx, True, axis=1)
    out[mask] = rd

    def bwd(g):
        ga = np.where(mask[..., None], 0, g).astype(g.dtype)
        gr = g[mask].astype(ACC).sum(axis=0).astype(rd.dtype)
        return ga, gr

    return record("replace_rows", out, (a, row), bwd)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr_scale: dict[str, float] | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adam: grad {g.shape} vs param {p.shape} for {name}")
        g = g.astype(ACC)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=ACC)
            v = np.zeros(p.shape, dtype=ACC)
        else:
            m = m.astype(ACC)
            v = state.v[name].astype(ACC)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        lr = state.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(ACC) - step).astype(p.dtype)
        state.m[name] = m.astype(FLOAT)
        state.v[name] = v.astype(FLOAT)


# --------------------------------------------------------------------------
# RNG

def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Seeded PCG64 stream, split deterministically by a path of names."""
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        keys.append(n if isinstance(n, int) else zlib.crc32(str(n).encode()))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


# --------------------------------------------------------------------------
# Finite differences

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error; tiny pairs are compared absolutely."""
    a = np.asarray(analytic, dtype=ACC)
    n = np.asarray(numeric, dtype=ACC)
    diff = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    small = (np.abs(a) + np.abs(n)) < floor
    err = np.where(small, diff, diff / np.where(small, 1.0, denom))
    return float(err.max()) if err.size else 0.0


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
                     dtype=np.float64) -> list[np.ndarray]:
    """Central differences of a scalar ``fn`` wrt each input array."""
    base = [np.array(x, dtype=dtype) for x in inputs]
    grads = []
    with no_grad():
        for i, x in enumerate(base):
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                fp = fn(*[Tensor(b) for b in base]).item()
                flat[j] = old - h
                fm = fn(*[Tensor(b) for b in base]).item()
                flat[j] = old
                gflat[j] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                      dtype=FLOAT) -> list[np.ndarray]:
    ts = [Tensor(np.array(x, dtype=dtype), name=f"in{i}") for i, x in enumerate(inputs)]
    with GradTape() as tape:
        tape.watch({t.name: t for t in ts})
        loss = fn(*ts)
    g = tape.backward(loss)
    return [g[t.name] for t in ts]


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Max relative error between float32 reverse mode and float64 central differences."""
    ana = analytic_gradient(fn, inputs)
    num = numeric_gradient(fn, inputs, h=h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
