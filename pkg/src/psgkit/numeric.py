"""Dense float64 arrays with tape-based reverse-mode differentiation.

Only the primitives the relation network needs are provided. Every op
computes its forward value eagerly with numpy; when a :class:`Tape` is
active and at least one input requires a gradient, the op appends a
backward closure to the tape. :meth:`Tape.backward` replays the closures in
exact reverse order of recording.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_LOCAL = threading.local()


def _stack() -> list["Tape"]:
    st = getattr(_LOCAL, "stack", None)
    if st is None:
        st = _LOCAL.stack = []
    return st


class Tensor:
    """A float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, k: float):
        return power(self, k)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of differentiable operations.

    Usage::

        with Tape() as tape:
            loss = model(x)
        grads = tape.backward(loss, params)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self.records.append((out, inputs, fn))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]) -> dict | list:
        """Gradients of scalar ``loss`` w.r.t. ``params``.

        Returns a dict when ``params`` is a mapping, else a list in the same
        order. Parameters the loss does not reach get zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise ContractError("tape already consumed by a previous backward pass")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        if isinstance(params, Mapping):
            return {n: _grad_or_zero(grads, p) for n, p in params.items()}
        return [_grad_or_zero(grads, p) for p in params]


def _grad_or_zero(grads: dict, p: Tensor) -> np.ndarray:
    g = grads.get(id(p))
    if g is None:
        return np.zeros_like(p.data)
    return np.asarray(g, dtype=np.float64).reshape(p.shape)


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        tape.record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    if k == 0:
        return _make(np.ones_like(a.data), (a,), lambda g: (None,))
    return _make(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def log_sigmoid(a) -> Tensor:
    return neg(softplus(neg(a)))


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    u = c * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,))


# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(items: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in items)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(table, idx) -> Tensor:
    """table[idx] along axis 0 (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), back)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)


# normalizers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _make(out, (x, gain, bias), back)


# finite-difference checking


@dataclass
class BlockReport:
    name: str
    size: int
    max_abs_err: float
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, ...] = ()


@dataclass
class GradCheckReport:
    rtol: float
    atol: float
    blocks: list[BlockReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def worst(self, k: int = 5) -> list[BlockReport]:
        return sorted(self.blocks, key=lambda b: -b.max_rel_err)[:k]


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    rtol: float = 1e-3,
    atol: float = 1e-6,
    h: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must build its scalar output from ``params`` every call. An entry
    passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``. ``analytic`` can be
    supplied to check externally computed gradients (used for negative
    controls).
    """
    first = fn().item()
    second = fn().item()
    if first != second:
        raise NonDeterministicError(f"fn returned {first!r} then {second!r} for identical inputs")

    if analytic is None:
        with Tape() as tape:
            loss = fn()
        analytic = tape.backward(loss, params)

    report = GradCheckReport(rtol=rtol, atol=atol)
    for name in (names if names is not None else params.keys()):
        p = params[name]
        a = np.asarray(analytic[name])
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        abs_err = np.abs(a - num)
        scale = np.maximum(np.abs(a), np.abs(num))
        ok = abs_err <= atol + rtol * scale
        rel = abs_err / np.maximum(scale, atol)
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        report.blocks.append(BlockReport(
            name=name,
            size=int(p.data.size),
            max_abs_err=float(abs_err.max(initial=0.0)),
            max_rel_err=float(rel.max(initial=0.0)),
            passed=bool(ok.all()),
            worst_index=tuple(int(i) for i in worst),
        ))
    return report
