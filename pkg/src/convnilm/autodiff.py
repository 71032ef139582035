"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation appends one record to the active ``Tape``.
``backward`` walks the tape once, newest record first, and returns the
gradient of a scalar loss with respect to every leaf that required it.

Tapes are thread-local, so independent training sessions can run in
separate threads without sharing gradient state.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count(1)
_local = threading.local()
_DTYPES = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf from its inputs."""


def set_precision(name: str) -> None:
    """Switch the dtype used for newly created tensors ("float64" or "float32")."""
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    _dtype = _DTYPES[name]


def get_precision() -> str:
    return "float64" if _dtype is np.float64 else "float32"


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run a block without recording anything on the tape."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_dtype)
        if self.data.ndim and 0 in self.data.shape:
            raise ValueError(f"zero-length extent in shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.node = next(_ids) if requires_grad else None
        self.grad = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.node = next(_ids) if requires_grad else None
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Record:
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of operation records for one define-by-run session."""

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def record(self, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        ids = []
        for t in inputs:
            if t.requires_grad:
                if t.node not in self._produced:
                    self.leaves.setdefault(t.node, t)
                ids.append(t.node)
            else:
                ids.append(None)
        self.records.append(Record(tuple(ids), out.node, backward))
        self._produced.add(out.node)

    def clear(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self._produced.clear()

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, inputs: Iterable[Tensor] = (), retain: bool = False) -> dict[int, Tensor]:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or (loss.node not in self._produced and loss.node not in self.leaves):
            raise ValueError("loss is not on the tape (detached or built without gradients)")

        wanted = dict(self.leaves)
        for t in inputs:
            if t.requires_grad:
                wanted.setdefault(t.node, t)

        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            if rec.output not in wanted:
                del grads[rec.output]
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if node is None or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi

        out = {}
        for node, leaf in wanted.items():
            g = grads.get(node)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            out[node] = Tensor._wrap(g, False)
        if not retain:
            self.clear()
        return out


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def fresh_tape():
    """Install an empty tape for the duration of a block."""
    prev = getattr(_local, "tape", None)
    _local.tape = Tape()
    try:
        yield _local.tape
    finally:
        _local.tape = prev


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> dict[int, Tensor]:
    """Gradients of ``loss`` keyed by node id; ``inputs`` adds leaves the loss may not use."""
    return get_tape().backward(loss, inputs)


def make_op(out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and record its backward rule if any input needs it."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("operation produced non-finite values")
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        get_tape().record(inputs, result, backward_fn)
    return result


# ---------------------------------------------------------------------------
# Elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by an exact zero")

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return make_op(a.data / b.data, (a, b), back)


def elementwise(kind: str, a, b) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return make_op(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data >= 0
    return make_op(np.where(pos, a.data, slope * a.data), (a,),
                   lambda g: (np.where(pos, g, slope * g),))


def prelu(a: Tensor, alpha: Tensor) -> Tensor:
    """Leaky ReLU with a learnable slope broadcast against ``a``."""
    pos = a.data >= 0

    def back(g):
        ga = np.where(pos, g, g * alpha.data)
        gw = np.where(pos, 0.0, g * a.data)
        return ga, _unbroadcast(gw, alpha.shape)

    return make_op(np.where(pos, a.data, alpha.data * a.data), (a, alpha), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# Reductions and shape ops


def _norm_axes(axes, ndim: int) -> tuple[int, ...] | None:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (None means all; an empty list is the identity)."""
    if kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {kind!r}")
    ax = _norm_axes(axes, a.ndim)
    if not ax:
        return make_op(a.data.copy(), (a,), lambda g: (g,))
    if any(a.shape[i] == 0 for i in ax):
        raise ValueError("cannot reduce a zero-length axis")
    count = int(np.prod([a.shape[i] for i in ax]))
    kept = tuple(1 if i in ax else n for i, n in enumerate(a.shape))

    if kind == "sum":
        out = a.data.sum(axis=ax, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),)
    elif kind == "mean":
        out = a.data.sum(axis=ax, keepdims=keepdims) / count
        back = lambda g: (np.broadcast_to(g.reshape(kept) / count, a.shape).copy(),)
    else:
        out = a.data.max(axis=ax, keepdims=keepdims)
        hit = a.data == out.reshape(kept)
        ties = hit.sum(axis=ax, keepdims=True)
        back = lambda g: (hit * (g.reshape(kept) / ties),)
    return make_op(np.asarray(out), (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(out.copy(), (a,), back)


def pad_last(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    n = a.shape[-1]
    return make_op(np.pad(a.data, widths), (a,), lambda g: (g[..., left:left + n],))


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_op(np.cumsum(a.data, axis=axis), (a,), back)


# ---------------------------------------------------------------------------
# Verification harness


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` receives one Tensor per input array and must return a scalar.
    Runs in 64-bit precision regardless of the current setting.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    prev = get_precision()
    set_precision("float64")
    try:
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        with fresh_tape() as tape:
            leaves = [Tensor(x, requires_grad=True) for x in arrays]
            loss = f(*leaves)
            grads = tape.backward(loss, leaves)
        analytic = [grads[t.node].data for t in leaves]

        def value(xs):
            with no_grad():
                v = f(*[Tensor(x) for x in xs]).data
            if not np.all(np.isfinite(v)):
                raise NonFiniteError("non-finite value during finite differences")
            return float(v)

        worst = 0.0
        for k, x in enumerate(arrays):
            flat = x.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = value(arrays)
                flat[i] = orig - eps
                lo = value(arrays)
                flat[i] = orig
                g_fd = (hi - lo) / (2 * eps)
                g_ad = analytic[k].reshape(-1)[i]
                err = abs(g_fd - g_ad) / max(1e-12, abs(g_fd) + abs(g_ad))
                worst = max(worst, err)
        return worst
    finally:
        set_precision(prev)
