"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Outside a tape every op is a plain numpy call, so
inference pays no bookkeeping cost.

    with Tape() as tape:
        loss = cross_entropy(logits, targets, mask)
    tape.backward(loss)
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "prefixtune_active_tape", default=None
)


class BackwardError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Leaves (tensors not produced by a recorded op) accumulate ``grad`` when
    they have ``requires_grad`` set.  Non-leaf gradients are never stored.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    return _wrap(a, b), b


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops for one backward pass.

    Nodes are appended as ops execute, so the list is already in topological
    order.  A tape supports exactly one ``backward`` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise BackwardError("backward already called on this tape; start a new Tape")
        if loss._tape is not self:
            raise BackwardError("loss was not produced on this tape")
        if loss.size != 1:
            raise BackwardError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif t._tape is None:
                    gi = np.asarray(gi, dtype=t.data.dtype)
                    if gi.shape != t.shape:
                        gi = np.broadcast_to(gi, t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Run reverse mode from ``loss`` over the tape that produced it."""
    if loss._tape is None:
        raise BackwardError("loss is not attached to a tape (was it computed inside `with Tape()`?)")
    loss._tape.backward(loss)


def _recording(*inputs: Tensor) -> Optional[Tape]:
    tape = _active_tape.get()
    if tape is None or tape.consumed:
        return None
    for t in inputs:
        if t.requires_grad:
            return tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)
    tape = _recording(a, b)
    if tape is not None:
        sa, sb = a.shape, b.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)
    tape = _recording(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def bw(g):
            ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
            gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
            return ga, gb

        tape.record(out, (a, b), bw)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * (1.0 - y * y),))
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = Tensor(0.5 * x * (1.0 + t))
    tape = _recording(a)
    if tape is not None:

        def bw(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        tape.record(out, (a,), bw)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * y,))
    return out


# ----------------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batch semantics; batch dims of either side may be absent."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_nd_2d(a, b)
    out = Tensor(np.matmul(a.data, b.data))
    tape = _recording(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def bw(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        tape.record(out, (a, b), bw)
    return out


def _matmul_nd_2d(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, n) as a single 2-D GEMM
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = Tensor((a2 @ b.data).reshape(lead + (b.shape[1],)))
    tape = _recording(a, b)
    if tape is not None:
        bd = b.data
        ashape = a.shape

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ashape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        tape.record(out, (a, b), bw)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = Tensor(a.data.reshape(shape))
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.reshape(src),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (materialized copy)."""
    src = a.shape
    out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape))))
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (_unbroadcast(g, src),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _recording(*tensors)
    if tape is not None:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        tape.record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def getitem(a: Tensor, index) -> Tensor:
    out = Tensor(a.data[index])
    tape = _recording(a)
    if tape is not None:
        shape, dtype = a.shape, a.data.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        tape.record(out, (a,), bw)
    return out


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])
    tape = _recording(table)
    if tape is not None:
        shape, dtype = table.shape, table.data.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
            return (full,)

        tape.record(out, (table,), bw)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)))
    tape = _recording(a)
    if tape is not None:
        shape = a.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        tape.record(out, (a,), bw)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ----------------------------------------------------------------------------
# fused transformer primitives
# ----------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _recording(x)
    if tape is not None:
        tape.record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm gain/bias must have shape ({x.shape[-1]},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = Tensor(xhat * gain.data + bias.data)
    tape = _recording(x, gain, bias)
    if tape is not None:
        gd = gain.data
        d = xd.shape[-1]

        def bw(g):
            gx = ggain = gbias = None
            if gain.requires_grad:
                ggain = (g * xhat).reshape(-1, d).sum(axis=0)
            if bias.requires_grad:
                gbias = g.reshape(-1, d).sum(axis=0)
            if x.requires_grad:
                gh = g * gd
                gx = rstd * (
                    gh
                    - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
                )
            return gx, ggain, gbias

        tape.record(out, (x, gain, bias), bw)
    return out


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over the positions selected by ``mask``.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``mask`` share its
    leading shape.  Targets at unmasked positions are never read.
    """
    v = logits.shape[-1]
    lead = logits.shape[:-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(lead)
    if mask is None:
        mask = np.ones(lead, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(lead)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    sel = targets[mask]
    if sel.min() < 0 or sel.max() >= v:
        raise ValueError(f"cross_entropy: target ids must lie in [0, {v})")
    flat = logits.data.reshape(-1, v)
    mflat = mask.reshape(-1)
    tflat = np.where(mflat, targets.reshape(-1), 0)
    rows = np.arange(flat.shape[0])
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[rows, tflat]
    total = float(np.where(mflat, nll, 0.0).sum())
    out = Tensor(np.asarray(total / count, dtype=logits.dtype))
    tape = _recording(logits)
    if tape is not None:

        def bw(g):
            p = np.exp(logp)
            p[rows, tflat] -= 1.0
            p *= (mflat / count)[:, None]
            return ((g * p).reshape(logits.shape),)

        tape.record(out, (logits,), bw)
    return out


# ----------------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------------


def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``t.data``."""
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data)
        flat[i] = orig - eps
        lo = float(f().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grads(f: Callable[[], Tensor], tensors: Iterable[Tensor]) -> list[np.ndarray]:
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| / max(max|a|, max|b|); a scale-aware error for gradient checks."""
    if a.size == 0:
        return 0.0
    den = max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-12)
    return float(np.abs(a - b).max()) / den
