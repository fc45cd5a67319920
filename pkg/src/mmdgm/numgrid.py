"""Dense arrays with tape-recorded reverse-mode differentiation.

Values are plain numpy arrays wrapped in :class:`Tensor`. Every operation
executed while a :class:`Tape` is active appends one record to it; calling
:meth:`Tape.backward` walks the records in reverse creation order (which is a
valid topological order) and pushes vector-Jacobian products to the inputs.
Leaves bound to a :class:`ParamStore` entry accumulate into that entry's
gradient buffer.

Broadcasting is deliberately narrow: operands must have equal shapes or one of
them must be a scalar. Row-vector biases go through :func:`affine`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by {op!r}")
        self.op = op


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An immutable array value, optionally a leaf that receives gradients."""

    __array_priority__ = 100.0
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.value = np.asarray(value, dtype=dtype if dtype is not None else np.float64)
        self.requires_grad = requires_grad
        # leaf accumulator; ParamStore leaves share the store's buffer
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Operation log for one forward/backward pass.

    Use as a context manager; operations executed inside are recorded.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.full_like(loss.value, seed)}
        leaves: dict[int, Tensor] = {}
        if loss.grad is not None and not self._produced(loss):
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.grad is not None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is not None:
                leaf.grad += g.reshape(leaf.grad.shape)

    def _produced(self, t: Tensor) -> bool:
        return any(r.out is t for r in self.records)


def backward(loss: Tensor) -> None:
    """Back-propagate through the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward called outside of a Tape context")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: gradients never flow through the result."""
    return Tensor(x.value if isinstance(x, Tensor) else x)


stop_gradient = constant


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a), _unbroadcast(g * av, b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


# -- elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def expm1(a) -> Tensor:
    """``exp(a) - 1`` without cancellation near zero."""
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.expm1(a.value)
    return _emit("expm1", y, (a,), lambda g: (g * (y + 1.0),))


def log(a) -> Tensor:
    a = as_tensor(a)
    xc = np.maximum(a.value, LOG_FLOOR)
    live = a.value >= LOG_FLOOR
    return _emit("log", np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.value)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _emit("softplus", np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def rectify(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _emit("rectify", np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (a valid subgradient for norms)."""
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise DimensionError("sqrt of a negative value")
    y = np.sqrt(a.value)
    safe = np.where(y > 0, y, 1.0)
    return _emit("sqrt", y, (a,), lambda g: (np.where(y > 0, 0.5 * g / safe, 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _emit("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return _emit("transpose", a.value.T, (a,), lambda g: (g.T,))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} does not match {w.shape[1]} outputs")
    xv, wv = x.value, w.value
    return _emit("affine", xv @ wv + b.value, (x, w, b),
                 lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


# -- reductions and shape ----------------------------------------------------

def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("reduce_sum", np.asarray(a.value.sum(axis=axis)), (a,), vjp)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Iterable, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat: {err}") from None
    return _emit("concat", value, parts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def tile_rows(a, times: int) -> Tensor:
    """Stack ``times`` copies of a 2-D array vertically (block order)."""
    a = as_tensor(a)
    n = a.shape[0]
    return _emit("tile_rows", np.tile(a.value, (times, 1)), (a,),
                 lambda g: (g.reshape(times, n, *a.shape[1:]).sum(axis=0),))


def take_rows(a, idx) -> Tensor:
    """Pick ``a[i, idx[i]]`` for every row ``i``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"take_rows: index shape {idx.shape} for array {a.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros_like(a.value)
        out[rows, idx] = g
        return (out,)

    return _emit("take_rows", a.value[rows, idx], (a,), vjp)


def select_rows(a, idx) -> Tensor:
    """Row gather ``a[idx]``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("select_rows", a.value[idx], (a,), vjp)


# -- parameters --------------------------------------------------------------

class ParamStore:
    """Named parameter arrays, each paired with a gradient accumulator."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        v = np.array(value, dtype=self.dtype)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._values if n.startswith(prefix)]

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        v = self._values[name]
        v[...] = value

    def leaf(self, name: str) -> Tensor:
        """Tensor view of a parameter; gradients land in the store's buffer."""
        t = Tensor.__new__(Tensor)
        t.value = self._values[name]
        t.grad = self._grads[name]
        t.requires_grad = True
        t.name = name
        return t

    def items(self):
        return self._values.items()

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def num_params(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def flat_values(self, prefix: str = "") -> np.ndarray:
        return np.concatenate([self._values[n].ravel() for n in self.names(prefix)])

    def flat_grads(self, prefix: str = "") -> np.ndarray:
        return np.concatenate([self._grads[n].ravel() for n in self.names(prefix)])

    def state(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self._values.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            if n not in self._values:
                raise KeyError(f"unknown parameter {n!r}")
            if self._values[n].shape != np.shape(v):
                raise DimensionError(f"{n}: shape {np.shape(v)} != {self._values[n].shape}")
            self._values[n][...] = v
