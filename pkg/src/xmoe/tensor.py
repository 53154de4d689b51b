"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

This is the numerical substrate for everything else in the package: a small
op set (only what the model needs), 64-bit floats throughout, and a dynamic
tape that is re-recorded every step. Broadcasting is deliberately limited to
the shapes the model uses -- equal shapes, scalars, a trailing vector against
a matrix, and a column against a matrix; anything else raises DimensionError.

Running ops with no active Tape performs plain numpy math with no recording,
which is what the finite-difference oracle relies on for speed.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input lies outside an operation's numeric domain (e.g. log of x <= 0)."""


class ContractError(ValueError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of differentiable operations.

    Creation order is topological order by construction: every input of a
    node was recorded (or is a leaf) before the node itself. backward()
    replays the list once, in reverse.
    """

    def __init__(self) -> None:
        # each node: (output tensor, parent tensors, vjp callable)
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Context manager that suspends recording (used by the FD oracle)."""

    def __enter__(self) -> None:
        _tape_stack().append(None)

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False


class Tensor:
    """A dense float64 array, optionally participating in gradient taping.

    `requires_grad` marks leaves (parameters, probed inputs); intermediate
    results are tracked implicitly while a Tape is active. `grad` is
    allocated lazily and accumulates across backward() calls until zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absval(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    stack = _tape_stack()
    if stack:
        tape = stack[-1]
        if tape is not None:
            for p in parents:
                if p.requires_grad or p._tape is tape:
                    out._tape = tape
                    tape.nodes.append((out, parents, vjp))
                    break
    return out


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and (sb == (sa[1],) or sb == (sa[0], 1)):
        return
    if len(sb) == 2 and (sa == (sb[1],) or sa == (sb[0], 1)):
        return
    raise DimensionError(f"shapes {sa} and {sb} are not broadcastable here")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- binary elementwise ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data / b.data)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data)

    def vjp(g):
        return (-g,)

    return _record(out, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to the first argument."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data.shape, b.data.shape)
    mask = a.data >= b.data
    out = Tensor(np.where(mask, a.data, b.data))

    def vjp(g):
        return (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * ~mask, b.data.shape),
        )

    return _record(out, (a, b), vjp)


# --- unary elementwise ----------------------------------------------------


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = _stable_sigmoid(a.data)
    out = Tensor(y)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), vjp)


def logsigmoid(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-np.logaddexp(0.0, -a.data))

    def vjp(g):
        return (g * _stable_sigmoid(-a.data),)

    return _record(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), vjp)


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def vjp(g):
        return (g * y,)

    return _record(out, (a,), vjp)


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = Tensor(np.log(a.data))

    def vjp(g):
        return (g / a.data,)

    return _record(out, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative input")
    y = np.sqrt(a.data)
    out = Tensor(y)

    def vjp(g):
        return (g / (2.0 * y),)

    return _record(out, (a,), vjp)


def square(a) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data * a.data)

    def vjp(g):
        return (2.0 * g * a.data,)

    return _record(out, (a,), vjp)


def absval(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.abs(a.data))

    def vjp(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), vjp)


# --- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the 1D/2D combinations the model uses."""
    a, b = _lift(a), _lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError("matmul supports 1D and 2D operands only")
    ka = a.data.shape[-1]
    kb = b.data.shape[0]
    if ka != kb:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        a2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
        b2 = b.data.reshape(-1, 1) if b.ndim == 1 else b.data
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        da = (g2 @ b2.T).reshape(a.data.shape)
        db = (a2.T @ g2).reshape(b.data.shape)
        return da, db

    return _record(out, (a, b), vjp)


def outer(u, v) -> Tensor:
    u, v = _lift(u), _lift(v)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError("outer expects two vectors")
    out = Tensor(np.outer(u.data, v.data))

    def vjp(g):
        return g @ v.data, g.T @ u.data

    return _record(out, (u, v), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    out = Tensor(a.data.T.copy())

    def vjp(g):
        return (g.T,)

    return _record(out, (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape))

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), vjp)


# --- softmax family -------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; outputs are a simplex along that axis."""
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), vjp)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along `axis` (axis is removed)."""
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(np.log(s) + m, axis=axis))

    def vjp(g):
        soft = np.exp(a.data - m) / s
        return (np.expand_dims(g, axis) * soft,)

    return _record(out, (a,), vjp)


# --- reductions -----------------------------------------------------------


def _reduce_vjp_expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise DimensionError(f"sum axis {axis} invalid for shape {a.data.shape}")
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        return (_reduce_vjp_expand(g, a.data.shape, axis, keepdims),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise DimensionError(f"mean axis {axis} invalid for shape {a.data.shape}")
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        return (_reduce_vjp_expand(g, a.data.shape, axis, keepdims) / n,)

    return _record(out, (a,), vjp)


# --- indexing -------------------------------------------------------------


def row(a, i: int) -> Tensor:
    """Select index `i` along the leading axis (a vector from a matrix,
    a scalar from a vector)."""
    a = _lift(a)
    out = Tensor(a.data[i])

    def vjp(g):
        z = np.zeros_like(a.data)
        z[i] = g
        return (z,)

    return _record(out, (a,), vjp)


def take(a, idx) -> Tensor:
    """Gather rows (leading axis) at integer indices; duplicates allowed."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), vjp)


def take_elems(a, rows_idx, cols_idx) -> Tensor:
    """Gather a[rows[j], cols[j]] into a vector."""
    a = _lift(a)
    if a.ndim != 2:
        raise DimensionError("take_elems expects a matrix")
    rows_idx = np.asarray(rows_idx, dtype=np.intp)
    cols_idx = np.asarray(cols_idx, dtype=np.intp)
    out = Tensor(a.data[rows_idx, cols_idx])

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows_idx, cols_idx), g)
        return (z,)

    return _record(out, (a,), vjp)


def scatter(values, idx, length: int) -> Tensor:
    """Place values[j] at position idx[j] of a zero tensor with `length`
    leading extent (inverse of take)."""
    values = _lift(values)
    idx = np.asarray(idx, dtype=np.intp)
    shape = (length,) + values.data.shape[1:]
    z = np.zeros(shape, dtype=np.float64)
    np.add.at(z, idx, values.data)
    out = Tensor(z)

    def vjp(g):
        return (g[idx],)

    return _record(out, (values,), vjp)


def stack(tensors: Sequence) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts]))

    def vjp(g):
        return tuple(g[j] for j in range(len(ts)))

    return _record(out, tuple(ts), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for j in range(len(ts)):
            slicer[axis] = slice(bounds[j], bounds[j + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _record(out, tuple(ts), vjp)


# --- autodiff driver ------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into the .grad of every reachable leaf.

    Intermediate gradients live only for the duration of the call; repeated
    calls without zeroing leaf grads accumulate.
    """
    if root.data.shape != ():
        raise ContractError("backward requires a scalar root")
    tape = root._tape
    if tape is None:
        raise ContractError("backward root is not tracked on a tape")
    flows: dict[int, np.ndarray] = {id(root): np.ones(())}
    for out, parents, vjp in reversed(tape.nodes):
        g = flows.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None:
                continue
            if parent.requires_grad:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            if parent._tape is tape:
                acc = flows.get(id(parent))
                flows[id(parent)] = pg if acc is None else acc + pg


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Compare autodiff gradients of the scalar f() against central differences.

    Returns the max over all coordinates of |fd - g| / max(|g|, 1e-8) where
    g is the autodiff gradient and fd = (f(x+eps) - f(x-eps)) / (2 eps).
    f must be deterministic.
    """
    if not (0.0 < epsilon <= 1e-3):
        raise ContractError("epsilon must lie in (0, 1e-3]")
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    max_rel = 0.0
    with no_tape():
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = f().item()
                flat[i] = orig - epsilon
                f_minus = f().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * epsilon)
                rel = abs(fd - gflat[i]) / max(abs(gflat[i]), 1e-8)
                if rel > max_rel:
                    max_rel = rel
    return max_rel
