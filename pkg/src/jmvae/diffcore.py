"""Dense tensors with a recording tape and reverse-mode gradients.

Every primitive is a pair of functions in ``FORWARD`` / ``BACKWARD``.  Calls
made while a :class:`Tape` is active, and touching at least one tensor that
depends on a parameter, are appended to that tape.  :func:`backward` walks
the tape in reverse (the recording order is already topological).

Shape rules
-----------
matmul      (n, k) @ (k, m) -> (n, m)
add/sub/    equal shapes, or one operand is a bias row ``(d,)`` / ``(1, d)``
mul/div     against ``(n, d)``, or a scalar
exp, log, sqrt, square, relu, sigmoid, softplus, clip, scale, neg
            elementwise, shape preserved
softmax     row-wise over the last axis
concat      tensors equal in all but the last axis, joined on the last axis
slice       ``[..., start:stop]`` on the last axis
sum         ``axis=None`` -> scalar, ``axis=-1`` -> one value per row
mean        scalar mean over every element

Outputs are checked for NaN/Inf after every primitive.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

from .errors import NumericsError, ShapeError

_local = threading.local()


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Switch the default dtype (``np.float32`` training, ``np.float64`` checks)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "tape", "index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    kwargs: dict = field(default_factory=dict)


class Tape:
    """Ordered log of primitive applications; usable as a context manager."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the current leaf values."""
        values: dict[int, np.ndarray] = {}
        out = []
        for rec in self.records:
            args = [values.get(id(t), t.data) for t in rec.inputs]
            y = FORWARD[rec.op](*args, **rec.kwargs)
            values[id(rec.output)] = y
            out.append(y)
        return out


# ---------------------------------------------------------------- shape rules


def _broadcast_ok(big: tuple, small: tuple) -> bool:
    if small == big or small == ():
        return True
    return len(big) == 2 and (small == big[-1:] or small == (1, big[-1]))


def _binary_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if _broadcast_ok(a.shape, b.shape) or _broadcast_ok(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    if len(shape) == 1:
        return g.sum(axis=0)
    return g.sum(axis=0, keepdims=True)


# ------------------------------------------------------------------ forwards


def _f_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _f_add(a, b):
    _binary_shape("add", a, b)
    return a + b


def _f_sub(a, b):
    _binary_shape("sub", a, b)
    return a - b


def _f_mul(a, b):
    _binary_shape("mul", a, b)
    return a * b


def _f_div(a, b):
    _binary_shape("div", a, b)
    return a / b


def _f_softmax(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _f_concat(*xs):
    if not xs:
        raise ShapeError("concat: no inputs")
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.ndim == 0 or x.shape[:-1] != lead:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=-1)


def _f_slice(a, start, stop):
    if a.ndim == 0 or not (0 <= start < stop <= a.shape[-1]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {a.shape}")
    return a[..., start:stop]


def _f_sum(a, axis=None):
    if axis is None:
        return np.asarray(a.sum(), dtype=a.dtype)
    if axis != -1 or a.ndim != 2:
        raise ShapeError(f"sum: axis={axis} unsupported for shape {a.shape}")
    return a.sum(axis=-1)


def _f_mean(a):
    return np.asarray(a.mean(), dtype=a.dtype)


def _f_clip(a, lo, hi):
    return np.clip(a, lo, hi)


FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "div": _f_div,
    "scale": lambda a, c: a * a.dtype.type(c),
    "neg": lambda a: -a,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "square": np.square,
    "relu": lambda a: np.maximum(a, 0),
    "sigmoid": expit,
    "softplus": lambda a: np.logaddexp(a.dtype.type(0), a),
    "softmax": _f_softmax,
    "concat": _f_concat,
    "slice": _f_slice,
    "sum": _f_sum,
    "mean": _f_mean,
    "clip": _f_clip,
}


# ----------------------------------------------------------------- backwards
# Each rule receives the record and the output cotangent and returns one
# cotangent per input (``None`` where no gradient flows).


def _b_matmul(r, g):
    a, b = r.inputs
    return g @ b.data.T, a.data.T @ g


def _b_add(r, g):
    a, b = r.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _b_sub(r, g):
    a, b = r.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _b_mul(r, g):
    a, b = r.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _b_div(r, g):
    a, b = r.inputs
    ga = g / b.data
    gb = -g * a.data / np.square(b.data)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _b_softmax(r, g):
    y = r.output.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _b_concat(r, g):
    out, start = [], 0
    for x in r.inputs:
        stop = start + x.shape[-1]
        out.append(g[..., start:stop])
        start = stop
    return tuple(out)


def _b_slice(r, g):
    (a,) = r.inputs
    full = np.zeros_like(a.data)
    full[..., r.kwargs["start"]:r.kwargs["stop"]] = g
    return (full,)


def _b_sum(r, g):
    (a,) = r.inputs
    if r.kwargs.get("axis") is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.repeat(g[:, None], a.shape[-1], axis=1),)


def _b_mean(r, g):
    (a,) = r.inputs
    return (np.full_like(a.data, g / a.data.size),)


def _b_clip(r, g):
    (a,) = r.inputs
    inside = (a.data >= r.kwargs["lo"]) & (a.data <= r.kwargs["hi"])
    return (g * inside,)


BACKWARD: dict[str, Callable] = {
    "matmul": _b_matmul,
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "div": _b_div,
    "scale": lambda r, g: (g * g.dtype.type(r.kwargs["c"]),),
    "neg": lambda r, g: (-g,),
    "exp": lambda r, g: (g * r.output.data,),
    "log": lambda r, g: (g / r.inputs[0].data,),
    "sqrt": lambda r, g: (g * 0.5 / r.output.data,),
    "square": lambda r, g: (2 * g * r.inputs[0].data,),
    "relu": lambda r, g: (g * (r.inputs[0].data > 0),),
    "sigmoid": lambda r, g: (g * r.output.data * (1 - r.output.data),),
    "softplus": lambda r, g: (g * expit(r.inputs[0].data),),
    "softmax": _b_softmax,
    "concat": _b_concat,
    "slice": _b_slice,
    "sum": _b_sum,
    "mean": _b_mean,
    "clip": _b_clip,
}


@contextmanager
def corrupted_backward(op: str, factor: float = 1.5):
    """Temporarily scale one backward rule; used for mutation tests."""
    original = BACKWARD[op]
    BACKWARD[op] = lambda r, g: tuple(None if x is None else x * factor for x in original(r, g))
    try:
        yield
    finally:
        BACKWARD[op] = original


def _apply(op: str, inputs: tuple, **kwargs) -> Tensor:
    tensors = []
    like = next((t for t in inputs if isinstance(t, Tensor)), None)
    for x in inputs:
        tensors.append(as_tensor(x, like))
    with np.errstate(all="ignore"):
        y = FORWARD[op](*[t.data for t in tensors], **kwargs)
    if not np.isfinite(y).all():
        raise NumericsError(f"non-finite output from primitive '{op}'", op=op)
    out = Tensor(y)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out.tape = tape
        out.index = len(tape.records)
        tape.records.append(Record(op, tuple(tensors), out, kwargs))
    return out


def matmul(a, b) -> Tensor:
    return _apply("matmul", (a, b))


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def div(a, b) -> Tensor:
    return _apply("div", (a, b))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def neg(a) -> Tensor:
    return _apply("neg", (a,))


def exp(a) -> Tensor:
    return _apply("exp", (a,))


def log(a) -> Tensor:
    return _apply("log", (a,))


def sqrt(a) -> Tensor:
    return _apply("sqrt", (a,))


def square(a) -> Tensor:
    return _apply("square", (a,))


def relu(a) -> Tensor:
    return _apply("relu", (a,))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (a,))


def softplus(a) -> Tensor:
    return _apply("softplus", (a,))


def softmax(a) -> Tensor:
    return _apply("softmax", (a,))


def concat(*xs) -> Tensor:
    return _apply("concat", xs)


def slice_last(a, start: int, stop: int) -> Tensor:
    return _apply("slice", (a,), start=int(start), stop=int(stop))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors the op name
    return _apply("sum", (a,), axis=axis)


def mean(a) -> Tensor:
    return _apply("mean", (a,))


def clip(a, lo: float, hi: float) -> Tensor:
    return _apply("clip", (a,), lo=float(lo), hi=float(hi))


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name."""
    if op not in FORWARD:
        raise KeyError(f"unknown primitive {op!r}")
    return _apply(op, inputs, **kwargs)


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> dict:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Returns a dict keyed like ``params`` (names for a mapping, tensors for an
    iterable).  Parameters outside the loss's subgraph get zero gradients.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    items = list(params.items()) if isinstance(params, Mapping) else [(p, p) for p in params]

    grads: dict[int, np.ndarray] = {}
    if loss.tape is not None:
        grads[id(loss)] = np.ones_like(loss.data)
        records = loss.tape.records
        for rec in reversed(records[: loss.index + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, BACKWARD[rec.op](rec, g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    return {k: np.asarray(grads.get(id(p), np.zeros_like(p.data)), dtype=p.dtype) for k, p in items}


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current parameter values with
    any noise held fixed.  ``max_probes`` caps the number of coordinates probed
    per parameter (chosen with ``seed``); ``None`` probes all of them.
    """
    with Tape():
        loss = f()
        analytic = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            if not np.isfinite(num):
                raise NumericsError(f"non-finite finite difference for {name}[{i}]")
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
