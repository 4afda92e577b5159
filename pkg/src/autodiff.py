"""
Reverse-mode differentiation over dense float64 arrays.

Operations on tensors record themselves onto the active Trace (a tape).
Trace.backward() replays the tape once, in reverse, and accumulates
dLoss/dLeaf into every trainable leaf. Outside a trace, or inside
no_trace(), operations only compute values.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from src.errors import GradientError, ShapeError

logger = logging.getLogger("DuoField.Autodiff")

# Traces are confined to the thread that opened them.
_local = threading.local()


class Tensor:
    """n-dimensional float64 array that can take part in a trace."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional["Record"] = None
        self.name = name

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
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    """Leaf that never accumulates gradient."""
    return Tensor(data, requires_grad=False)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Record:
    """One recorded operation: operands, output, and its local backward rule."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]
    trace: "Trace"


class Trace:
    """
    Ordered tape of recorded operations.

    Use as a context manager to make it the active trace of the current thread:

        with Trace() as tape:
            loss = sum_(square(w))
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "Trace":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple, output: Tensor, rule: Callable) -> None:
        rec = Record(op, inputs, output, rule, self)
        output.node = rec
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.output.node = None
        self.records = []

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dLeaf into `.grad` of every trainable leaf reached by `loss`."""
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise GradientError("backward called on an empty trace")
        if loss.node is None or loss.node.trace is not self:
            raise GradientError("loss was not produced on this trace")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            upstream = pending.pop(id(rec.output), None)
            if upstream is None:
                continue
            for operand, grad in zip(rec.inputs, rec.backward(upstream)):
                if grad is None or not operand.tracked:
                    continue
                grad = np.asarray(grad, dtype=np.float64)
                if operand.node is None:
                    if operand.requires_grad:
                        operand.grad = grad.copy() if operand.grad is None else operand.grad + grad
                    continue
                key = id(operand)
                pending[key] = grad if key not in pending else pending[key] + grad


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_trace() -> Optional[Trace]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_trace() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backward(loss: Tensor) -> None:
    """Run backward on the trace that produced `loss`."""
    if loss.node is None:
        raise GradientError("loss is not connected to any trace")
    loss.node.trace.backward(loss)


def _emit(op: str, value: np.ndarray, inputs: tuple, rule: Callable) -> Tensor:
    out = Tensor(value)
    trace = active_trace()
    if trace is not None and any(t.tracked for t in inputs):
        trace.record(op, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---- binary elementwise ----

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    value = a.data / b.data
    return _emit("div", value, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * value / b.data, b.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(..., n, k) @ (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def rule(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga.reshape(a.shape), gb

    return _emit("matmul", a.data @ b.data, (a, b), rule)


# ---- unary ----

def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _emit("exp", value, (a,), lambda g: (g * value,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.maximum(a.data, 0.0)
    return _emit("relu", value, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = expit(a.data)
    return _emit("sigmoid", value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.data)
    return _emit("sqrt", value, (a,), lambda g: (0.5 * g / value,))


# ---- reductions and structure ----

def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def reshape(a: ArrayLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _emit("reshape", value, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: ArrayLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        value = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _emit("broadcast_to", value, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in parts)) from None
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", value, parts, rule)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.stack([t.data for t in parts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in parts)) from None

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _emit("stack", value, parts, rule)


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic slicing or integer-array gather; backward scatter-adds repeated rows."""
    a = as_tensor(a)
    try:
        value = a.data[index]
    except IndexError:
        raise ShapeError("slice", a.shape) from None

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", np.array(value), (a,), rule)


slice_ = getitem


# ---- finite-difference oracle ----

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs difference relative to the larger gradient magnitude."""
    scale_ = max(float(np.max(np.abs(analytic), initial=0.0)),
                 float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale_


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], target: Tensor,
                   h: float = 1e-5, entries: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of scalar fn(*inputs) w.r.t. `target` (NaN where not evaluated)."""
    numeric = np.full(target.shape, np.nan)
    indices = entries if entries is not None else list(np.ndindex(target.shape))
    with no_trace():
        for idx in indices:
            original = target.data[idx]
            target.data[idx] = original + h
            plus = fn(*inputs).item()
            target.data[idx] = original - h
            minus = fn(*inputs).item()
            target.data[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * h)
    return numeric


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare analytic gradients of scalar fn(*inputs) with central differences.
    Returns the worst relative error over all inputs that require grad.
    With max_entries, only that many randomly chosen entries per input are probed.
    """
    for t in inputs:
        t.zero_grad()
    with Trace() as tape:
        out = fn(*inputs)
    tape.backward(out)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        entries = None
        if max_entries is not None and t.size > max_entries:
            chooser = rng if rng is not None else np.random.default_rng(0)
            flat = chooser.choice(t.size, size=max_entries, replace=False)
            entries = [np.unravel_index(i, t.shape) for i in flat]
        numeric = numerical_grad(fn, inputs, t, h=h, entries=entries)
        probed = ~np.isnan(numeric)
        err = relative_error(analytic[probed], numeric[probed])
        logger.debug(f"gradcheck {t.name or t.shape}: rel err {err:.3e}")
        worst = max(worst, err)
    return worst
