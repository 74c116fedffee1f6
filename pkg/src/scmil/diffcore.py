"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every op appends one record to the tape shared by its inputs, so the tape is
topologically ordered by construction and the backward pass is a single
reverse sweep.

    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    loss = dot(x, x)
    grads = backward(tape, loss)      # {x.id: array([2., 4.])}
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12
_MACH_EPS = float(np.finfo(np.float64).eps)


class DiffError(ValueError):
    """Raised on malformed op inputs; carries the op name."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class ShapeError(DiffError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(op, f"incompatible shapes {shown}")
        self.shapes = shapes


class NonFiniteError(DiffError):
    pass


class Tensor:
    """A float64 array that remembers which tape produced it."""

    __slots__ = ("value", "id", "tape", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of executed ops.

    Each record is ``(out_id, input_ids, backward_fn)`` where ``backward_fn``
    maps the output gradient to one gradient per input (``None`` for inputs
    that do not need one).
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._next_id = 0

    def __len__(self) -> int:
        return self._next_id

    def _new(self, value: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor(value, self, self._next_id, requires_grad)
        self._next_id += 1
        return t

    def variable(self, value) -> Tensor:
        return self._new(np.array(value, dtype=np.float64), True)

    def constant(self, value) -> Tensor:
        return self._new(np.array(value, dtype=np.float64), False)

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray,
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op, "non-finite output")
        needs = any(t.requires_grad for t in inputs)
        out = self._new(value, needs)
        if needs:
            self._records.append((out.id, tuple(t.id for t in inputs), backward_fn))
        return out

    @property
    def records(self):
        return tuple(self._records)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. every node that depends on a variable."""
    if loss.tape is not tape:
        raise DiffError("backward", "loss was not produced on this tape")
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for out_id, input_ids, fn in reversed(tape._records):
        g = grads.get(out_id)
        if g is None:
            continue
        for in_id, gi in zip(input_ids, fn(g)):
            if gi is None:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + gi
            else:
                grads[in_id] = gi
    return grads


# --------------------------------------------------------------------------
# helpers


def _tape_of(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise DiffError("tape", "inputs recorded on different tapes")
    return tape


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return like.tape.constant(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    _tape_of(a, b)
    return a, b


def _grad_if(t: Tensor, g):
    return g if t.requires_grad else None


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeError(op, a.shape, b.shape)


# --------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a trailing-axis bias vector."""
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return a.tape.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_grad_if(a, g), _grad_if(b, _sum_to(g, b.shape))),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record(
        "mul", (a, b), av * bv,
        lambda g: (_grad_if(a, g * bv), _grad_if(b, _sum_to(g * av, b.shape))),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record("scale", (a,), a.value * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or a batched product of equal-leading-dim 3-D stacks."""
    _tape_of(a, b)
    ok = (a.ndim == b.ndim == 2 or (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0]))
    if not ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def grad(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return a.tape.record("matmul", (a, b), av @ bv, grad)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _tape_of(a, b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record(
        "dot", (a, b), np.asarray(av @ bv),
        lambda g: (_grad_if(a, g * bv), _grad_if(b, g * av)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return a.tape.record("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return a.tape.record("reshape", (a,), out, lambda g: (g.reshape(src),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return a.tape.record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return a.tape.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return a.tape.record("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise DiffError("log", "input outside (0, inf)")
    return a.tape.record("log", (a,), np.log(x), lambda g: (g / x,))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    src = a.shape
    out = np.asarray(a.value.sum(axis=axis))
    if axis is None:
        return a.tape.record("reduce_sum", (a,), out, lambda g: (np.broadcast_to(g, src).copy(),))
    return a.tape.record(
        "reduce_sum", (a,), out,
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),),
    )


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("reduce_mean", a.shape)
    return scale(reduce_sum(a, axis), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return a.tape.record("softmax", (a,), y, grad)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def grad(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return a.tape.record("log_softmax", (a,), y, grad)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """``a / (||a|| + 1e-12)`` along ``axis``."""
    x = a.value
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = norm + NORM_EPS
    y = x / denom

    def grad(g):
        # d/dx [x / (|x| + e)] applied to g
        proj = (g * x).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x * proj / (denom * denom * safe),)

    return a.tape.record("l2_normalize", (a,), y, grad)


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_check(fn: Callable[[dict[str, np.ndarray]], float],
                      grad_fn: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]],
                      params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between ``grad_fn`` and central differences of ``fn``.

    ``fn`` maps a dict of float64 arrays to a scalar; ``grad_fn`` returns the
    analytic gradient for each key. Relative error per coordinate is
    ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)``. A coordinate whose
    absolute disagreement is within the roundoff of the difference quotient
    itself (``4 * ulp-scale * max(|f+|, |f-|, 1) / (2 eps)``) scores 0, so
    flat directions do not report spurious relative error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = grad_fn(params)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for key, arr in work.items():
        g_ad = np.asarray(analytic.get(key, np.zeros_like(arr)), dtype=np.float64)
        flat = arr.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(work))
            flat[i] = orig - eps
            down = float(fn(work))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("finite_diff_check", f"non-finite value at {key}[{i}]")
            g_fd = (up - down) / (2.0 * eps)
            roundoff = 4.0 * _MACH_EPS * max(abs(up), abs(down), 1.0) / (2.0 * eps)
            if abs(g_flat[i] - g_fd) <= roundoff:
                continue
            err = abs(g_flat[i] - g_fd) / max(1e-12, abs(g_flat[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
