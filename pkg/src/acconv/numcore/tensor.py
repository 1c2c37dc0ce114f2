"""Dense float64 tensors with reverse-mode autodiff on a per-thread tape.

Define-by-run: every primitive that touches a gradient-requiring tensor
appends its output node to the active tape; ``backward(loss)`` replays the
tape in reverse, accumulating into ``.grad`` buffers exactly once per use,
then clears the tape. Deliberately small and slow-but-exact: everything is
float64 and single-threaded per tape.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ContractError, DimensionError

_tls = threading.local()


class Tape:
    """Ordered record of executed primitives for one thread."""

    def __init__(self):
        self.nodes = []
        self.epoch = 0

    def record(self, t):
        t._tape_pos = (self.epoch, len(self.nodes))
        self.nodes.append(t)

    def clear(self):
        for n in self.nodes:
            n._bwd = None
        self.nodes.clear()
        self.epoch += 1


def tape() -> Tape:
    """The calling thread's active tape."""
    t = getattr(_tls, "tape", None)
    if t is None:
        t = _tls.tape = Tape()
    return t


def is_grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager: run forward math without recording to the tape."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_bwd", "_tape_pos")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._bwd = None
        self._tape_pos = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars and ndarrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor(x)


def _make(data, bwd, *parents):
    """Build an op output; record it when grads are on and needed."""
    need = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._bwd = bwd
        tape().record(out)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_data(a, b, opname):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, bwd, a, b)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(out_data, bwd, a, b)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, bwd, a, b)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _binary_data(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, bwd, a, b)


def neg(x):
    def bwd(g):
        x._accum(-g)

    return _make(-x.data, bwd, x)


def exp(x):
    y = np.exp(x.data)

    def bwd(g):
        x._accum(g * y)

    return _make(y, bwd, x)


def log(x):
    def bwd(g):
        x._accum(g / x.data)

    return _make(np.log(x.data), bwd, x)


def tanh(x):
    y = np.tanh(x.data)

    def bwd(g):
        x._accum(g * (1.0 - y * y))

    return _make(y, bwd, x)


def sigmoid(x):
    # stable in both tails: exp(-|x|) never overflows
    s = 1.0 / (1.0 + np.exp(-np.abs(x.data)))
    y = np.where(x.data >= 0, s, 1.0 - s)

    def bwd(g):
        x._accum(g * y * (1.0 - y))

    return _make(y, bwd, x)


def relu(x):
    # subgradient at 0 is 0 (strict > in the mask)
    mask = x.data > 0

    def bwd(g):
        x._accum(g * mask)

    return _make(np.where(mask, x.data, 0.0), bwd, x)


def sqrt(x):
    y = np.sqrt(x.data)

    def bwd(g):
        x._accum(g / (2.0 * y))

    return _make(y, bwd, x)


def square(x):
    def bwd(g):
        x._accum(g * 2.0 * x.data)

    return _make(x.data * x.data, bwd, x)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape} is not a 2-D product")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(out_data, bwd, a, b)


def bmm(a, b):
    """Batched matmul: [B,M,K] @ [B,K,N] -> [B,M,N]."""
    a, b = _lift(a), _lift(b)
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm: {a.shape} @ {b.shape} is not a batched product")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accum(a.data.transpose(0, 2, 1) @ g)

    return _make(out_data, bwd, a, b)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x, shape):
    old = x.data.shape

    def bwd(g):
        x._accum(g.reshape(old))

    return _make(x.data.reshape(shape), bwd, x)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        x._accum(g.transpose(inv))

    return _make(x.data.transpose(axes), bwd, x)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(out_data, bwd, *tensors)


def narrow(x, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) outside axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g
        x._accum(buf)

    return _make(x.data[idx], bwd, x)


# ---------------------------------------------------------------------------
# reductions and friends
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, bwd, x)


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accum(y * (g - dot))

    return _make(y, bwd, x)


def dropout(x, rate, rng, training):
    """Inverted dropout: train-time keeps scale 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def embedding(table, ids):
    """Row gather from a [V, D] table; ids is an integer ndarray."""
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return _make(out_data, bwd, table)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor):
    """Populate grads for every requires_grad ancestor of `loss`; clear tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = tape()
    pos = loss._tape_pos
    if pos is None or pos[0] != t.epoch:
        raise ContractError("loss is not on the active tape (already cleared?)")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(t.nodes[: pos[1] + 1]):
        if node.grad is not None and node._bwd is not None:
            node._bwd(node.grad)
        # free saved activations and internal grads as the sweep passes;
        # leaves are never recorded, so their grads survive
        node._bwd = None
        node.grad = None
    t.clear()


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def glorot(shape, rng, fan_in=None, fan_out=None) -> Tensor:
    """uniform(-s, s), s = sqrt(6 / (fan_in + fan_out)); the default fans
    treat a matrix as [din, dout] and a conv kernel as [k..., cin, cout]."""
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1]))
    if fan_out is None:
        fan_out = int(np.prod(shape[:-2])) * shape[-1] if len(shape) > 1 else shape[-1]
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
