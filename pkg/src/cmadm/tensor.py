"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a plain function that computes its result
with numpy and, when a :class:`Tape` is active and at least one operand
requires a gradient, appends a backward closure to that tape.  The tape is
topologically ordered by construction, so :meth:`Tape.backward` is a single
reverse sweep.

Shapes never broadcast implicitly.  The only exceptions are the explicit
``scale`` (tensor times python scalar) and ``add_bias`` (add a vector along
the last axis) operations, and boolean masks passed to ``softmax`` and
``mean_rows``.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, EmptyInputError

_node_ids = itertools.count(1)
_active: list["Tape | None"] = []


class Tensor:
    """An n-dimensional array of float64 values.

    ``node_id`` is set for tensors that take part in differentiation
    (parameters and results recorded on a tape); constants carry ``None``.
    """

    __slots__ = ("value", "requires_grad", "node_id")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None

    @classmethod
    def _wrap(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.value = value
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids) if requires_grad else None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.value, False)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


class Tape:
    """Ordered computation record for one differentiation pass.

    Use as a context manager; operations evaluated inside the ``with`` block
    are recorded.  Create a fresh tape per training step.
    """

    def __init__(self):
        self.entries: list[tuple[str, tuple, int, Callable]] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _active.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` keyed by ``node_id``."""
        if loss.value.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any recorded parameter")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for _kind, in_ids, out_id, fn in reversed(self.entries):
            g = grads.pop(out_id, None) if out_id != loss.node_id else grads.get(out_id)
            if g is None:
                continue
            for nid, gi in zip(in_ids, fn(g)):
                if nid is None or gi is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = gi if prev is None else prev + gi
        return grads


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` (default: the innermost active tape).

    Returned gradients cover leaf tensors (parameters) and any intermediate
    node whose gradient was not consumed; look them up by ``node_id``.
    """
    if tape is None:
        tape = current_tape()
        if tape is None:
            raise ContractError("no active tape")
    return tape.backward(loss)


def current_tape() -> Tape | None:
    return _active[-1] if _active else None


@contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    _active.append(None)
    try:
        yield
    finally:
        _active.pop()


def _record(kind: str, inputs: Sequence[Tensor], value: np.ndarray, fn: Callable) -> Tensor:
    tape = _active[-1] if _active else None
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(value, False)
    out = Tensor._wrap(value, True)
    ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
    tape.entries.append((kind, ids, out.node_id, fn))
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported layouts: ``(..., r, k) @ (k, c)`` (shared right operand, also
    ``(k,) @ (k, c)``) and batched ``(B, r, k) @ (B, k, c)``.
    """
    av, bv = a.value, b.value
    if bv.ndim == 2 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        out = av @ bv
        k, c = bv.shape

        def fn(g):
            return g @ bv.T, av.reshape(-1, k).T @ g.reshape(-1, c)

        return _record("matmul", (a, b), out, fn)
    if (
        av.ndim == 3
        and bv.ndim == 3
        and av.shape[0] == bv.shape[0]
        and av.shape[2] == bv.shape[1]
    ):
        out = av @ bv

        def fn(g):
            return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

        return _record("matmul", (a, b), out, fn)
    raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")


def transpose_last(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last needs rank >= 2, got {x.shape}")
    return _record("transpose", (x,), np.swapaxes(x.value, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


# ------------------------------------------------------------------ elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", (x,), x.value * s, lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector matching the last axis of ``x``."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match {x.shape}")
    d = b.shape[0]
    return _record("add_bias", (x, b), x.value + b.value, lambda g: (g, g.reshape(-1, d).sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    pos = x.value > 0
    return _record("relu", (x,), np.where(pos, x.value, 0.0), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    if np.any(xv <= 0):
        raise DomainError("log of a non-positive value")
    return _record("log", (x,), np.log(xv), lambda g: (g / xv,))


def elementwise(kind: str, *inputs, s: float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes its factor through ``s``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "log": log, "exp": exp}
    if kind in binary:
        return binary[kind](*inputs)
    if kind in unary:
        return unary[kind](*inputs)
    if kind == "scale":
        return scale(inputs[0], s)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------- normalisations


def _axis_check(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    return axis


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax; masked-out positions (``mask == False``) get 0."""
    axis = _axis_check(x, axis)
    z = x.value if mask is None else np.where(mask, x.value, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis_check(x, axis)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record("log_softmax", (x,), y, lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -------------------------------------------------------------- shape plumbing


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise EmptyInputError("concat_last of nothing")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading shapes differ {[q.shape for q in parts]}"
            )
    sizes = [p.shape[-1] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=-1)
    return _record("concat", parts, out, lambda g: tuple(np.split(g, cuts, axis=-1)))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    d = x.shape[-1]
    if not 0 <= start < stop <= d:
        raise DimensionError(f"slice_last [{start}:{stop}] outside last extent {d}")
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _record("slice", (x,), x.value[..., start:stop], fn)


def mean_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the second-to-last axis, optionally only over ``mask`` rows."""
    if x.ndim < 2:
        raise DimensionError(f"mean_rows needs rank >= 2, got {x.shape}")
    n = x.shape[-2]
    if n == 0:
        raise EmptyInputError("mean_rows over zero rows")
    if mask is None:
        return _record(
            "mean_rows", (x,), x.value.mean(axis=-2),
            lambda g: (np.repeat(g[..., None, :] / n, n, axis=-2),),
        )
    w = mask.astype(np.float64)
    counts = w.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptyInputError("mean_rows with an all-false mask")
    w = (w / counts)[..., None]
    return _record("mean_rows", (x,), (x.value * w).sum(axis=-2), lambda g: (g[..., None, :] * w,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.full(shape, float(g)),))


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of ``x`` along axis 0 (embedding lookup, row repetition)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index outside [0, {n})")
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take", (x,), x.value[idx], fn)


def pick_last(x: Tensor, indices) -> Tensor:
    """``x[..., indices]`` elementwise: one entry of the last axis per row."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"pick_last: indices {idx.shape} vs rows {x.shape[:-1]}")
    expanded = idx[..., None]
    out = np.take_along_axis(x.value, expanded, axis=-1)[..., 0]
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, expanded, g[..., None], axis=-1)
        return (gx,)

    return _record("pick", (x,), out, fn)


def zeros(shape: Iterable[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)), False)
