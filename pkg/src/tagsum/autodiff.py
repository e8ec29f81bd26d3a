"""Minimal reverse-mode autodiff over dense float64 arrays.

A define-by-run tape: primitives record themselves on the innermost active
``Tape`` whenever an input is gradient-tracked, and ``backward`` replays the
records in reverse creation order. With no active tape (or inside
``no_grad()``) the forward pass runs value-only.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _current_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed forward computations."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Tape:
    """Ordered record of primitive applications (creation order = topo order)."""

    def __init__(self):
        self.records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "mismatched Tape nesting"
        return False


class Tensor:
    """Dense float64 value, optionally carrying a gradient buffer.

    ``grad`` exists iff ``requires_grad``; intermediates hold transient
    gradients only for the duration of a backward pass. ``node`` is the tape
    the tensor was recorded on, or None for leaves and value-only results.
    """

    __slots__ = ("values", "grad", "requires_grad", "node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t.node is not None)


def _emit(values, inputs, backward_fn) -> Tensor:
    out = Tensor(values)
    tape = _current_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        out.node = tape
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every tracked input of ``loss``.

    Gradients accumulate (+=) into ``requires_grad`` leaves; repeated calls
    without zeroing add up. The tape is freed afterwards.
    """
    if loss.values.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.node
    if tape is None:
        raise ValueError("backward: loss is not recorded on a tape")
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, ig in zip(inputs, backward_fn(g)):
            if ig is None or not isinstance(t, Tensor):
                continue
            if t.requires_grad:
                t.grad += ig
            elif t.node is not None:
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.array(ig)  # copy: ig may alias g
                else:
                    acc += ig
    tape.records.clear()


# --- primitives ---------------------------------------------------------


def _check_elementwise(name: str, a: Tensor, b: Tensor):
    # only scalar (size-1) operands may broadcast
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _fit(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a broadcast gradient back onto a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    return _emit(a.values + b.values, (a, b),
                 lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    return _emit(a.values - b.values, (a, b),
                 lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    return _emit(a.values * b.values, (a, b),
                 lambda g: (_fit(g * b.values, a.shape), _fit(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)
    return _emit(a.values / b.values, (a, b),
                 lambda g: (_fit(g / b.values, a.shape),
                            _fit(-g * a.values / (b.values * b.values), b.shape)))


def scalar_mul(c: float, t: Tensor) -> Tensor:
    """Multiply by a python-float constant (no gradient for the constant)."""
    t = as_tensor(t)
    c = float(c)
    return _emit(c * t.values, (t,), lambda g: (c * g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, np.outer(av, g)))
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        return _emit(av @ bv, (a, b), lambda g: (np.outer(g, bv), av.T @ g))
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))
    raise ValueError(f"matmul: unsupported ranks {a.shape} vs {b.shape}")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.values for t in tensors], axis=axis),
                 tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _emit(np.stack([t.values for t in tensors], axis=axis),
                 tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def slice_(t: Tensor, key) -> Tensor:
    t = as_tensor(t)

    def bwd(g):
        gi = np.zeros_like(t.values)
        np.add.at(gi, key, g)
        return (gi,)

    return _emit(np.array(t.values[key]), (t,), bwd)


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    return _emit(t.values.reshape(shape), (t,), lambda g: (g.reshape(t.shape),))


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    x = t.values
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(out, (t,), lambda g: (g * out * (1.0 - out),))


def tanh(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.tanh(t.values)
    return _emit(out, (t,), lambda g: (g * (1.0 - out * out),))


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return _emit(np.log(t.values), (t,), lambda g: (g / t.values,))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.values - np.max(t.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (t,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids``; gradient scatter-adds into rows."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(table.values[idx], (table,), bwd)


def sum(t: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors np.sum
    t = as_tensor(t)
    if axis is None:
        return _emit(np.sum(t.values), (t,),
                     lambda g: (np.full(t.shape, g, dtype=np.float64),))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).copy(),)

    return _emit(np.sum(t.values, axis=axis), (t,), bwd)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("minimum", a, b)
    take_a = a.values <= b.values  # ties route to the first argument
    return _emit(np.minimum(a.values, b.values), (a, b),
                 lambda g: (_fit(g * take_a, a.shape), _fit(g * ~take_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("maximum", a, b)
    take_a = a.values >= b.values
    return _emit(np.maximum(a.values, b.values), (a, b),
                 lambda g: (_fit(g * take_a, a.shape), _fit(g * ~take_a, b.shape)))


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-C vector to every row of an (R, C) matrix."""
    m, v = as_tensor(m), as_tensor(v)
    if m.values.ndim != 2 or v.shape != (m.shape[1],):
        raise ValueError(f"add_rowvec: shape mismatch {m.shape} vs {v.shape}")
    return _emit(m.values + v.values[None, :], (m, v),
                 lambda g: (g, g.sum(axis=0)))


def add_colvec(m: Tensor, v: Tensor) -> Tensor:
    """Add v[i] to every entry of row i of an (R, C) matrix."""
    m, v = as_tensor(m), as_tensor(v)
    if m.values.ndim != 2 or v.shape != (m.shape[0],):
        raise ValueError(f"add_colvec: shape mismatch {m.shape} vs {v.shape}")
    return _emit(m.values + v.values[:, None], (m, v),
                 lambda g: (g, g.sum(axis=1)))


# --- verification oracle -------------------------------------------------


def grad_check(f, x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps ``x`` to a scalar Tensor and must be deterministic. The
    relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not x.requires_grad:
        raise ValueError("grad_check: x must require gradients")
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    saved = x.grad.copy()
    x.grad[...] = 0.0
    try:
        with Tape():
            y = f(x)
        backward(y)
        analytic = x.grad.copy()
    finally:
        x.grad[...] = saved

    numeric = np.zeros_like(x.values)
    flat_x = x.values.reshape(-1)
    flat_n = numeric.reshape(-1)
    with no_grad():
        for i in range(flat_x.size):
            orig = flat_x[i]
            flat_x[i] = orig + epsilon
            fp = float(f(x).values)
            flat_x[i] = orig - epsilon
            fm = float(f(x).values)
            flat_x[i] = orig
            flat_n[i] = (fp - fm) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
