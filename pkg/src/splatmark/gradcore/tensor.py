"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every learnable quantity in the package flows through `Tensor`. Operations
executed inside a `with Tape():` block are recorded; `backward(loss)` replays
the recorded operations once, in reverse order, accumulating gradients into
`.grad`. Tensors created outside any op (parameters, constants) are leaves.

Design constraints honoured here:
  * float64 throughout; 32-bit precision appears only in serialized files.
  * deterministic gradient accumulation (plain numpy sums, fixed order).
  * a Tape belongs to one training thread; tensors are immutable after
    creation except for `.grad` (and in-place optimizer updates on leaves).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "record",
    "backward",
    "forward_op",
]


class Tape:
    """Ordered record of operations, replayed in reverse by `backward`."""

    current: "Tape | None" = None

    def __init__(self):
        self.ops: list[_Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = Tape.current
        Tape.current = self
        return self

    def __exit__(self, *exc):
        Tape.current = self._prev
        self._prev = None
        return False


class no_grad:
    """Suspend recording; forwards run as plain numpy."""

    def __enter__(self):
        self._prev = Tape.current
        Tape.current = None
        return self

    def __exit__(self, *exc):
        Tape.current = self._prev
        return False


class _Node:
    __slots__ = ("kind", "inputs", "output", "bwd", "tape", "idx")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind, inputs, out_data, bwd) -> Tensor:
    """Create the output tensor of an op, recording it if gradients may flow.

    `bwd(g_out)` must return per-input gradients (ndarray or None) in input
    order. Modules outside gradcore use this hook for their custom ops.
    """
    out = Tensor(out_data)
    tape = Tape.current
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node()
        node.kind = kind
        node.inputs = tuple(inputs)
        node.output = out
        node.bwd = bwd
        node.tape = tape
        node.idx = len(tape.ops)
        tape.ops.append(node)
        out._node = node
    return out


def backward(loss: Tensor):
    """Populate `.grad` of every requires_grad tensor with d(loss)/d(tensor).

    Repeated calls accumulate. Only operations recorded at or before the loss
    node are visited, each exactly once, in reverse recording order.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    tape = loss._node.tape
    stop = loss._node.idx
    flow: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape.ops[: stop + 1]):
        entry = flow.pop(id(node.output), None)
        if entry is None:
            continue
        g_out = entry[1]
        out = node.output
        out.grad = g_out if out.grad is None else out.grad + g_out
        grads = node.bwd(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            slot = flow.get(id(t))
            if slot is None:
                flow[id(t)] = [t, g]
            else:
                slot[1] = slot[1] + g
    # whatever is left in flow never reached a recorded node: leaves
    for t, g in flow.values():
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_same_or_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{kind}: shapes {a.data.shape} and {b.data.shape} do not conform"
        ) from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_or_broadcast("add", a, b)
    return record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_or_broadcast("sub", a, b)
    return record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_or_broadcast("mul", a, b)
    return record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_or_broadcast("div", a, b)
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return record("div", (a, b), out, bwd)


def neg(a):
    a = _wrap(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a):
    a = _wrap(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    return record("sqrt", (a,), out, lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def square(a):
    a = _wrap(a)
    return record("square", (a,), a.data * a.data, lambda g: (g * 2.0 * a.data,))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = _wrap(a)
    out = _sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def abs_(a):
    a = _wrap(a)
    # subgradient 0 at the kink
    s = np.sign(a.data)
    return record("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def clamp(a, lo=None, hi=None):
    """Clip values; gradient is stopped outside [lo, hi]."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return record("clamp", (a,), out, lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return record("sum", (a,), out, bwd)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size // out.size

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.data.shape).copy(),)

    return record("mean", (a,), out, bwd)


# ---------------------------------------------------------------------------
# shape / indexing / linear algebra


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = _wrap(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return record(
        "transpose",
        (a,),
        a.data.transpose(axes),
        lambda g: (g.transpose(inv),),
    )


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bwd)


def slice_(a, key):
    a = _wrap(a)
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return record("slice", (a,), out.copy(), bwd)


def gather_rows(a, idx):
    """Select rows along axis 0 by integer index; backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record("gather", (a,), a.data[idx].copy(), bwd)


def broadcast_to(a, shape):
    a = _wrap(a)
    out = np.broadcast_to(a.data, shape)
    return record(
        "broadcast",
        (a,),
        out.copy(),
        lambda g: (_unbroadcast(g, a.data.shape),),
    )


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    return record(
        "matmul",
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def normalize(a, axis=-1, eps=1e-12):
    """v / ||v||2 along `axis`."""
    a = _wrap(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return record("normalize-vector", (a,), out, bwd)


# ---------------------------------------------------------------------------
# kind-string dispatcher

_KINDS = {
    "add": add,
    "sub": sub,
    "mul-elementwise": mul,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "concat": lambda *ts, **kw: concat(list(ts), **kw),
    "slice": slice_,
    "broadcast": broadcast_to,
    "normalize-vector": normalize,
}


def forward_op(kind: str, *inputs, **kwargs):
    """Run an op by kind name (conv2d and avg-pool live in gradcore.nn)."""
    if kind in ("conv2d", "avg-pool"):
        from . import nn

        fn = nn.conv2d if kind == "conv2d" else nn.avg_pool
        return fn(*inputs, **kwargs)
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
