"""Tape-based reverse-mode autodiff over dense numpy arrays.

Tensors hold float32 data by default. A float64 array passed in stays
float64, which is what :func:`finite_difference_check` relies on to get a
usable central difference: float32 constants promote cleanly and the
perturbed path runs in double precision.

Ops record themselves on the innermost active :class:`Tape` when at least
one input requires a gradient. Outside a tape everything runs eagerly with
no bookkeeping, which is how evaluation and probing run.

Broadcasting is limited to the leading-batch case: the second operand of
``add``/``mul`` may have a shape equal to a suffix of the first operand's
shape (a bias vector added to a ``(B, L, d)`` activation, say). Anything
else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeError",
    "strict_numerics",
    "no_tape",
    "matmul",
    "add",
    "mul",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "layernorm",
    "embedding",
    "concat",
    "index",
    "cross_entropy",
    "reshape",
    "transpose",
    "sum",
    "finite_difference_check",
]


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _strict() -> bool:
    return getattr(_local, "strict", False)


@contextlib.contextmanager
def strict_numerics(enabled: bool = True):
    """Raise :class:`NumericError` whenever an op sees NaN/Inf inputs."""
    prev = _strict()
    _local.strict = enabled
    try:
        yield
    finally:
        _local.strict = prev


@contextlib.contextmanager
def no_tape():
    """Suspend recording, e.g. for evaluation inside a training step."""
    saved = _tapes()[:]
    _tapes().clear()
    try:
        yield
    finally:
        _tapes().extend(saved)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float64 and arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None  # set for op outputs only

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

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

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor; ``trainable`` decides whether it collects gradients."""

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable
    input_ids: tuple = ()
    output_id: int = -1


@dataclass
class Tape:
    """Ordered record of ops executed while the tape is active.

    Use as a context manager; ops executed inside are recorded when any of
    their inputs needs a gradient. :meth:`backward` may run once.
    """

    records: list = field(default_factory=list)
    consumed: bool = False

    def __post_init__(self):
        self._ids = itertools.count()
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()

    def _node_id(self, t: Tensor) -> int:
        if t._tape is self:
            return t.node_id
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = next(self._ids)
        return self._leaf_ids[key]

    def record(self, kind: str, inputs: tuple, out_data: np.ndarray, backward: Callable) -> Tensor:
        input_ids = tuple(self._node_id(t) for t in inputs if isinstance(t, Tensor))
        out = Tensor(out_data, requires_grad=True)
        out._tape = self
        out.node_id = next(self._ids)
        self.records.append(OpRecord(kind, inputs, out, backward, input_ids, out.node_id))
        return out

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; re-run the forward pass first")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape (detached node)")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t._tape is None:
                    gi = gi.astype(t.data.dtype, copy=False)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif t._tape is self:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
                else:
                    raise TapeError(f"op {rec.kind!r} references a node from another tape")
        self.records.clear()


def _record(kind: str, inputs: tuple, out_data: np.ndarray, backward: Callable) -> Tensor:
    if _strict():
        for t in inputs:
            if isinstance(t, Tensor) and not np.all(np.isfinite(t.data)):
                raise NumericError(f"{kind}: non-finite values in input of shape {t.shape}")
    stack = _tapes()
    if stack and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return stack[-1].record(kind, inputs, out_data, backward)
    return Tensor(out_data)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_suffix(kind: str, a: Tensor, b: Tensor) -> int:
    """Number of leading axes of ``a`` that ``b`` broadcasts over."""
    if a.shape == b.shape:
        return 0
    nb = b.ndim
    if nb <= a.ndim and a.shape[a.ndim - nb:] == b.shape:
        return a.ndim - nb
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform "
                     "(second operand must match or be a trailing suffix)")


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    return g.sum(axis=tuple(range(lead))) if lead else g


# -- ops -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with shapes ``(..., m, k) @ (..., k, n)`` or ``(..., m, k) @ (k, n)``."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, backward)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    lead = _check_suffix("add", a, b)

    def backward(g):
        return g, _reduce_lead(g, lead)

    return _record("add", (a, b), a.data + b.data, backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may also be a Python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a, c = _t(a), float(b)

        def backward_scalar(g):
            return (g * c,)

        return _record("mul", (a,), a.data * np.asarray(c, dtype=a.data.dtype), backward_scalar)
    a, b = _t(a), _t(b)
    lead = _check_suffix("mul", a, b)

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_lead(g * a.data, lead) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, backward)


def relu(x) -> Tensor:
    x = _t(x)
    on = x.data > 0

    def backward(g):
        return (g * on,)

    return _record("relu", (x,), np.where(on, x.data, 0).astype(x.data.dtype), backward)


def tanh(x) -> Tensor:
    x = _t(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1 - y * y),)

    return _record("tanh", (x,), y, backward)


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1)

    def backward(g):
        return (g * y * (1 - y),)

    return _record("sigmoid", (x,), y, backward)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, broadcastable) zeroes out
    entries where it is False; those entries get exactly zero probability."""
    x = _t(x)
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(mask, x.shape)
        z = np.where(mask, x.data, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0)
        e = np.where(mask, np.exp(z - zmax), 0).astype(x.data.dtype)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, backward)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} needs gamma/beta of shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = x.ndim - 1

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_lead(g * xhat, lead) if gamma.requires_grad else None
        gb = _reduce_lead(g, lead) if beta.requires_grad else None
        return gx, gg, gb

    return _record("layernorm", (x, gamma, beta), out.astype(x.data.dtype, copy=False), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: ``out[...] = table[ids[...]]``; output shape ``ids.shape + (d,)``."""
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows "
                         f"(got min {ids.min()}, max {ids.max()})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", (table,), out, backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_t(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _record("concat", tensors, out, backward)


def index(x, key) -> Tensor:
    """Basic (slice/int) indexing; recorded as the ``slice`` op."""
    x = _t(x)
    if isinstance(key, np.ndarray) or (isinstance(key, tuple) and any(
            isinstance(k, (list, np.ndarray)) for k in key)) or isinstance(key, list):
        raise ShapeError("slice: only basic slicing is supported; use embedding for gathers")
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _record("slice", (x,), np.array(out, copy=True), backward)


def cross_entropy(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean softmax cross-entropy of ``logits (N, V)`` against int ``targets (N,)``.

    Rows whose target equals ``ignore_index`` contribute nothing.
    """
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target is ignored")
    safe = np.where(keep, targets, 0)
    if safe.max() >= logits.shape[1] or safe.min() < 0:
        raise IndexError(f"cross_entropy: target out of range for {logits.shape[1]} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    nll = lse - z[rows, safe]
    loss = np.asarray((nll * keep).sum() / n, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, safe] -= 1
        return (p * (keep[:, None] * (g / n)),)

    return _record("cross_entropy", (logits,), loss, backward)


def reshape(x, shape) -> Tensor:
    x = _t(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _t(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (x,), np.transpose(x.data, axes), backward)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", (x,), out, backward)


# -- gradient oracle -------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-3) -> float:
    """Max relative error between backprop and a central difference.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor. The point is
    promoted to float64 so the difference quotient is not swamped by float32
    rounding; every coordinate is perturbed.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.array(point, dtype=np.float64)

    def value(x: np.ndarray) -> float:
        with no_tape():
            return float(np.asarray(f(Tensor(x)).data).reshape(()))

    base = value(x0)
    if value(x0) != base:
        raise RuntimeError("finite_difference_check: f is not deterministic")

    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
        tape.backward(loss)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad.astype(np.float64)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += epsilon
        xm[i] -= epsilon
        flat[i] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
