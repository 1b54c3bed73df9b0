"""Dense tensors with a reverse-mode tape.

Values are numpy arrays (row-major, channels-last). An op records itself on
the active :class:`Tape` only when one of its inputs requires a gradient, so
code running outside a tape (or inside :func:`no_grad`) is plain inference.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.check_finite = False
    return _state.tapes


def active_tape() -> "Tape | None":
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    A tape belongs to the thread that entered it. It is meant to be used for a
    single backward pass and then dropped.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        tapes = _stack()
        if tapes and tapes[-1] is self:
            tapes.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and loss._op is None:
            leaves[id(loss)] = loss
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._op is None:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g
        self.ops.clear()


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that recorded it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._op[0] if loss._op is not None else active_tape()
    if tape is None:
        raise RuntimeError("loss was not produced on an active tape")
    tape.backward(loss)


@contextmanager
def no_grad():
    """Suspend recording: ops inside produce constants."""
    tapes = _stack()
    saved = list(tapes)
    tapes.clear()
    try:
        yield
    finally:
        tapes.extend(saved)


@contextmanager
def detect_anomaly():
    """Check every op output for NaN/Inf and raise naming the op."""
    _stack()
    prev = _state.check_finite
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if _state.__dict__.get("check_finite") and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{name}'")
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = (tape, name)
        tape.ops.append(_Op(name, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = Tensor(a), Tensor(b)
    return a, b


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("div: divisor contains zeros")
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NumericalError("log: input has non-positive entries")
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad < 0):
        raise NumericalError("sqrt: input has negative entries")
    out = np.sqrt(ad)

    def bw(g):
        if np.any(out == 0):
            raise NumericalError("sqrt: gradient undefined at zero")
        return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at zero is 0."""
    ad = a.data
    return _make("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    ad = a.data
    keep = ad >= lo
    return _make("clamp_min", np.maximum(ad, lo).astype(ad.dtype, copy=False), (a,),
                 lambda g: (g * keep,))


def clamp_st(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clamp in the forward pass, identity (straight-through) in the backward pass."""
    ad = a.data
    return _make("clamp_st", np.clip(ad, lo, hi), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, neg, exp, log, sigmoid, sqrt."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid, "sqrt": sqrt,
             "abs": abs_}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


# ---------------------------------------------------------------- contraction

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def bw(g):
        gy = g * out
        s = gy.sum(axis=axis, keepdims=True)
        gy -= out * s
        return (gy,)

    return _make("softmax", out, (a,), bw)


# ---------------------------------------------------------------- index remaps

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def reshape_permute_concat(a, spec: dict) -> Tensor:
    """Apply one index remap described by ``spec``.

    ``{"reshape": shape}``, ``{"permute": axes}`` or ``{"concat": others, "axis": k}``.
    """
    if "reshape" in spec:
        return reshape(a, spec["reshape"])
    if "permute" in spec:
        return permute(a, spec["permute"])
    if "concat" in spec:
        return concat([a, *spec["concat"]], axis=spec.get("axis", -1))
    raise ValueError(f"inconsistent remap spec {spec!r}")


def roll(a: Tensor, shifts: tuple, axes: tuple) -> Tensor:
    if not any(shifts):
        return a
    back = tuple(-s for s in shifts)
    return _make("roll", np.roll(a.data, shifts, axes), (a,),
                 lambda g: (np.roll(g, back, axes),))


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    if not any(b or e for b, e in widths):
        return a
    index = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return _make("pad", np.pad(a.data, widths), (a,), lambda g: (g[index],))


def crop(a: Tensor, index: tuple) -> Tensor:
    """Basic slicing with gradient scattered back into zeros."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make("crop", np.ascontiguousarray(a.data[index]), (a,), bw)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (along axis 0) by an integer index array of any shape."""
    index = np.asarray(index)
    shape, dtype = a.shape, a.dtype
    rest = shape[1:]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + rest))
        return (full,)

    return _make("take", a.data[index], (a,), bw)


# ---------------------------------------------------------------- finite differences

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """Max abs difference, scaled by the larger of the two gradients' max magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    abs_err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if abs_err == 0.0:
        return 0.0, 0.0
    return abs_err / max(scale, 1e-12), abs_err


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float,
                 indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` on the flat ``indices``."""
    x = np.array(x, copy=True)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx), dtype=np.float64)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            xp = flat[i]
            fp = float(f(Tensor(x)).data)
            flat[i] = orig - h
            xm = flat[i]
            fm = float(f(Tensor(x)).data)
            flat[i] = orig
            out[n] = (fp - fm) / (float(xp) - float(xm))
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4,
                      tol: float = 1e-3, max_checks: int | None = None,
                      seed: int = 0, oracle_dtype=np.float64) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    The tape gradient is taken in ``x``'s own dtype; the difference quotient is
    evaluated in ``oracle_dtype`` so rounding in the oracle stays negligible.
    """
    x = as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    probe.zero_grad()
    tape.backward(y)
    analytic = probe.grad.reshape(-1)
    n = analytic.size
    if max_checks is not None and max_checks < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, max_checks, replace=False))
    else:
        idx = np.arange(n)
    numeric = numeric_grad(f, x.data.astype(oracle_dtype), h, idx)
    rel, abs_err = rel_error(analytic[idx], numeric)
    return GradCheckReport(rel, abs_err, len(idx), tol)
