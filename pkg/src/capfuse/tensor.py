"""Small reverse-mode autodiff engine on numpy float32 arrays, plus Adam.

Every differentiable op records a node carrying a monotonically increasing
sequence id (its position on the tape).  ``backward`` gathers the nodes
reachable from the loss and replays their backward rules in reverse recording
order, which is a valid reverse topological order because a node's inputs
always exist before it is recorded.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32

_seq = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


class NumericalError(ArithmeticError):
    """Raised on non-finite values where finite ones are required."""


def _dt():
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Run forward ops in ``dtype`` (float64 is used by the finite-difference oracle)."""
    prev = _dt()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, metric passes)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dt())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self):
        return None if self._node is None else self._node.seq

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = "leaf" if self._node is None else self._node.op
        return f"Tensor(shape={self.shape}, {tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, o)
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    dt = _dt()
    out.data = data if data.dtype == dt else data.astype(dt)
    out.grad = None
    out._node = None
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = Node(op, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = _dt()(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, x, neg)
    dy = np.where(x > 0, 1.0, neg + alpha).astype(DTYPE)
    return _make(y, "elu", (a,), lambda g: (g * dy,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), "clamp", (a,), lambda g: (g * inside,))


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    y = a.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        elif axes is None and not keepdims:
            g = g.reshape((1,) * len(shape))
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _make(np.atleast_1d(y), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(_dt())

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64)
        return (y * (g - dot.astype(g.dtype)),)

    return _make(y, "softmax", (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    y64 = x - lse
    y = y64.astype(_dt())
    p = np.exp(y64).astype(_dt())

    def bw(g):
        gs = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (g - p * gs,)

    return _make(y, "log_softmax", (a,), bw)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shape ops

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(sizes)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic and advanced indexing (the latter covers gathers with repeats)."""
    shape = a.shape
    try:
        y = a.data[idx]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {shape}") from None

    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(not isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(np.ascontiguousarray(y), "slice", (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        y = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {shape}") from None
    return _make(np.ascontiguousarray(y), "broadcast_to", (a,), lambda g: (_unbroadcast(g, old),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {table.shape}")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], "embedding", (table,), bw)


# -------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        return
    nodes = {}
    stack = [loss._node]
    while stack:
        n = stack.pop()
        if n.seq in nodes:
            continue
        nodes[n.seq] = n
        for t in n.inputs:
            if t._node is not None and t._node.seq not in nodes:
                stack.append(t._node)

    grads = {loss._node.seq: np.ones(loss.shape, dtype=DTYPE)}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = grads.pop(seq, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                k = t._node.seq
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
            else:
                gi = np.asarray(gi, dtype=DTYPE).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# ------------------------------------------------------------------ grad check

def grad_check(build: Callable, seed: int, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(rng)`` returns ``(fn, leaves)`` where ``fn()`` rebuilds the scalar
    loss from the (mutable) leaves.  Analytic gradients come from a float32
    backward pass; the numeric side re-runs ``fn`` in float64 with each leaf
    entry moved by exactly +/- h.  Errors are ``|a - n| / max(1, |a|, |n|)``.
    """
    rng = np.random.default_rng(seed)
    fn, leaves = build(rng)
    for t in leaves:
        t.grad = None
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("grad_check: non-finite loss")
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in leaves]

    saved = [t.data for t in leaves]
    worst = 0.0
    try:
        for t in leaves:
            t.data = t.data.astype(np.float64)
        with precision(np.float64), no_grad():
            for t, an in zip(leaves, analytic):
                flat = t.data.reshape(-1)
                an = an.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(fn().data.reshape(-1)[0])
                    flat[i] = orig - h
                    fm = float(fn().data.reshape(-1)[0])
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * h)
                    if not (math.isfinite(num) and math.isfinite(an[i])):
                        raise NumericalError("grad_check: non-finite gradient")
                    worst = max(worst, abs(an[i] - num) / max(1.0, abs(an[i]), abs(num)))
    finally:
        for t, d in zip(leaves, saved):
            t.data = d
    return worst


# ---------------------------------------------------------------------- init

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: x.copy() for k, x in self.m.items()},
                         {k: x.copy() for k, x in self.v.items()})


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1)))
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        c = DTYPE(max_norm / (total + 1e-12))
        for g in grads.values():
            g *= c
    return total


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params[k].data``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        g64 = g.astype(np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        m = np.zeros(p.shape) if m is None else m.astype(np.float64)
        v = np.zeros(p.shape) if v is None else v.astype(np.float64)
        m = b1 * m + (1.0 - b1) * g64
        v = b2 * v + (1.0 - b2) * g64 * g64
        state.m[k] = m.astype(DTYPE)
        state.v[k] = v.astype(DTYPE)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - upd).astype(DTYPE)


def collect_grads(params: Mapping[str, Tensor]) -> dict:
    return {k: (np.zeros(p.shape, dtype=DTYPE) if p.grad is None else p.grad)
            for k, p in params.items()}


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    vals = params.values() if isinstance(params, Mapping) else params
    for p in vals:
        p.grad = None
