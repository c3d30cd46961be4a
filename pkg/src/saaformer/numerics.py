"""Dense tensors and tape-based reverse-mode differentiation.

Operations work on whole numpy arrays. While a :class:`Tape` is active
(``with Tape() as tape:``) every operation whose inputs require gradients is
appended to it; ``tape.backward(loss)`` replays the records in reverse and
accumulates into the ``grad`` slot of leaf tensors.

Gradients accumulate additively: calling ``backward`` twice on the same tape
without :func:`zero_grad` doubles every leaf gradient.

Broadcasting is never implicit. Use :func:`broadcast_axis` or
:func:`add_bias` when a lower-rank operand has to be spread out.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckResult",
    "tensor",
    "current_tape",
    "zero_grad",
    "custom_op",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "mul_bias",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "roll",
    "broadcast_axis",
    "sum_axis",
    "mean_axis",
    "reduce_max_axis",
    "softmax_axis",
    "grad_check",
]

_local = threading.local()


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Tapes are per-thread: entering a tape makes it the active one for the
    current thread only.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Tape | None = None

    def __enter__(self) -> Tape:
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ValueError(f"backward needs an explicit seed gradient for shape {loss.shape}")
            grad = np.ones_like(loss.data)
        produced = {id(r.out) for r in self.records}
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        if id(loss) not in produced and loss.requires_grad:
            _accumulate_leaf(loss, pending.pop(id(loss)))
            return
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ValueError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def custom_op(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap ``data`` as the output of an operation and record it on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(out, inputs, backward))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    """Scalar-tensor product, the one broadcast that is allowed implicitly."""
    return custom_op(x.data * s, (x,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` along the trailing axes of ``x`` (``b.shape == x.shape[-b.ndim:]``)."""
    if b.ndim < 1 or b.ndim > x.ndim or b.shape != x.shape[x.ndim - b.ndim :]:
        raise ValueError(f"add_bias: bias {b.shape} does not fit trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return custom_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def mul_bias(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a vector along the last axis of ``x``."""
    if s.ndim != 1 or s.shape[0] != x.shape[-1]:
        raise ValueError(f"mul_bias: vector {s.shape} does not fit last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    xd, sd = x.data, s.data
    return custom_op(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=lead)))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return custom_op(ad @ bd, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(np.argsort(axes)),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat: empty input")
    axis = axis % xs[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ValueError(f"take: range [{start}, {stop}) invalid for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    orig, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(orig, dtype=dtype)
        full[index] = g
        return (full,)

    return custom_op(x.data[index], (x,), backward)


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    """Cyclic rotation: element ``j`` moves to ``(j + shift) mod n``."""
    return custom_op(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, -shift, axis=axis),))


def broadcast_axis(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    expanded = np.expand_dims(x.data, axis)
    data = np.repeat(expanded, n, axis=axis)
    return custom_op(data, (x,), lambda g: (g.sum(axis=axis),))


# ---------------------------------------------------------------- reductions


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(x, axis, keepdims), 1.0 / x.shape[axis])


def reduce_max_axis(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Maximum along ``axis``, kept with extent 1 unless ``keepdims`` is false.

    The backward pass routes the whole incoming gradient to one element per
    slice: the lowest index among tied maxima.
    """
    axis = axis % x.ndim
    xd = x.data
    out = xd.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        idx = np.expand_dims(np.argmax(xd, axis=axis), axis)  # first occurrence on ties
        full = np.zeros_like(xd)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return custom_op(out, (x,), backward)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (x,), backward)


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_tensor: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float

    def __str__(self) -> str:
        return (
            f"max relative error {self.max_rel_error:.3e} at tensor {self.worst_tensor} "
            f"index {self.worst_index} (analytic {self.analytic:.6e}, numeric {self.numeric:.6e})"
        )


def roundoff_floor(value: float, step: float, tol: float, ulps: float = 4.0) -> float:
    """Smallest gradient a central difference resolves to relative ``tol``.

    Rounding ``f`` to 64 bits perturbs the difference quotient by about
    ``ulps * eps * |f| / (2 step)``. Used as the ``floor`` of :func:`grad_check`,
    coordinates below it must agree to within that absolute amount instead.
    """
    eps = np.finfo(np.float64).eps
    return ulps * eps * max(abs(value), 1.0) / (2.0 * step) / tol


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``f(x)`` with central differences.

    ``f`` must return a scalar tensor and be deterministic. Every coordinate of
    every tensor in ``x`` is perturbed in place (and restored). The error per
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    A central difference cannot resolve gradients much below
    ``eps * |f| / step``; see :func:`roundoff_floor` for a ``floor`` that
    accounts for it on large checks.
    """
    if step <= 0 or floor <= 0:
        raise ValueError("step and floor must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        for t in xs:
            t.requires_grad = False

        worst = GradCheckResult(0.0, -1, (), 0.0, 0.0)
        for ti, t in enumerate(xs):
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            grad_flat = analytic[ti].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                plus = float(f(x).data)
                flat[i] = orig - step
                minus = float(f(x).data)
                flat[i] = orig
                num = (plus - minus) / (2.0 * step)
                ana = float(grad_flat[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                if err > worst.max_rel_error or worst.worst_tensor < 0:
                    worst = GradCheckResult(err, ti, tuple(int(k) for k in np.unravel_index(i, t.shape)), ana, num)
        return worst
    finally:
        for t, flag in zip(xs, flags):
            t.requires_grad = flag
            t.grad = None
