"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every operation in this module records the
inputs it consumed and a closure mapping the output cotangent to input
cotangents.  Node ids come from a global counter, so a tensor's inputs always
carry smaller ids than the tensor itself and sorting by id is a valid
topological order for the backward sweep.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import einops
import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "debug_checks",
    "set_debug",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "sigmoid",
    "softplus",
    "reduce_sum",
    "mean",
    "var",
    "reduce_max",
    "reshape",
    "transpose",
    "rearrange",
    "broadcast_to",
    "softmax",
    "concat",
    "slice_axis",
    "trace",
    "backward",
    "gradient_check",
    "GradCheckReport",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_GELU_C = math.sqrt(2.0 / math.pi)

_ids = itertools.count()
_grad_enabled = True
_check_finite = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf while finite checks were enabled."""


def set_debug(flag: bool) -> bool:
    """Toggle post-operation NaN/Inf checks; returns the previous setting."""
    global _check_finite
    previous, _check_finite = _check_finite, bool(flag)
    return previous


@contextlib.contextmanager
def debug_checks(flag: bool = True) -> Iterator[None]:
    previous = set_debug(flag)
    try:
        yield
    finally:
        set_debug(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Immutable n-d array of float32/float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "_id", "__weakref__")
    __array_priority__ = 1000  # so ndarray <op> Tensor dispatches to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.asarray(arr)
    arr.flags.writeable = False
    t.data = arr
    t.requires_grad = False
    t.op = "leaf"
    t._parents = ()
    t._backward = None
    t._id = next(_ids)
    return t


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    data = np.asarray(data)
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = _wrap(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return _wrap(np.array(x, dtype=dtype if dtype is not None else np.float64))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner axes disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch axes disagree: {a.shape} x {b.shape}") from exc
    av, bv = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _make(av * bv, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "div")
    av, bv = a.data, b.data
    if np.any(bv == 0):
        raise ZeroDivisionError("div: divisor contains zeros")
    out = av / bv

    def backward(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.data
    if np.any(av <= 0):
        raise ValueError("log: argument has non-positive entries")
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: argument has negative entries")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * (x + k * x2 * x))
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) evaluated as max(x, 0) + log1p(e^-|x|)."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _check_nonempty(a: Tensor, axes: tuple[int, ...], op: str) -> int:
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError(f"{op}: reduction over an empty axis")
    return count


def _expand_back(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a, axes, "sum")
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_back(g, shape, axes, keepdims),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = _check_nonempty(a, axes, "mean")
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)
    inv = a.dtype.type(1.0 / n)
    return _make(out, (a,), lambda g: (_expand_back(g * inv, shape, axes, keepdims),), "mean")


def var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Biased variance: mean of squared deviations (divides by the axis length)."""
    axes = _norm_axes(axis, a.ndim)
    n = _check_nonempty(a, axes, "var")
    x = a.data
    centered = x - x.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)
    two_over_n = a.dtype.type(2.0 / n)

    def backward(g):
        return (_expand_back(g, x.shape, axes, keepdims) * centered * two_over_n,)

    return _make(out, (a,), backward, "var")


def reduce_max(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient flows to the first maximal entry."""
    (ax,) = _norm_axes(axis, a.ndim)
    _check_nonempty(a, (ax,), "max")
    x = a.data
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    out = np.take_along_axis(x, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def backward(g):
        gx = np.zeros_like(x)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, axis=ax)
        return (gx,)

    return _make(out, (a,), backward, "max")


# ---------------------------------------------------------------------------
# data movement


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _pattern_axes(side: str) -> list[list[str]]:
    groups: list[list[str]] = []
    current: list[str] | None = None
    for tok in side.replace("(", " ( ").replace(")", " ) ").split():
        if tok == "(":
            current = []
        elif tok == ")":
            groups.append(current)
            current = None
        elif current is not None:
            current.append(tok)
        else:
            groups.append([tok])
    return groups


def _axis_sizes(lhs: str, shape: tuple[int, ...], sizes: dict[str, int]) -> dict[str, int]:
    groups = _pattern_axes(lhs)
    if len(groups) != len(shape):
        raise ShapeError(f"pattern '{lhs}' has {len(groups)} axes, tensor has rank {len(shape)}")
    known = dict(sizes)
    for group, length in zip(groups, shape):
        unknown = [name for name in group if name not in known]
        fixed = math.prod(known[name] for name in group if name in known)
        if len(unknown) > 1:
            raise ShapeError(f"cannot infer sizes of {unknown} in '{lhs}'")
        if unknown:
            if fixed == 0 or length % fixed:
                raise ShapeError(f"axis of length {length} does not split into {group} with sizes {sizes}")
            known[unknown[0]] = length // fixed
        elif fixed != length:
            raise ShapeError(f"axis of length {length} does not match {group} with sizes {sizes}")
    return known


def rearrange(a: Tensor, pattern: str, **sizes: int) -> Tensor:
    """einops-style split/merge/permute; the gradient is the inverse pattern."""
    lhs, rhs = (s.strip() for s in pattern.split("->"))
    known = _axis_sizes(lhs, a.shape, sizes)
    out = einops.rearrange(a.data, pattern, **sizes)
    inverse = f"{rhs} -> {lhs}"
    return _make(out, (a,), lambda g: (einops.rearrange(g, inverse, **known),), "rearrange")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    return _make(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; rows of the output sum to one."""
    _norm_axes(axis, a.ndim)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].ndim
    (ax,) = _norm_axes(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    n = a.shape[ax]
    start, stop, _ = slice(start, stop).indices(n)
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    src, dtype = a.shape, a.dtype
    out = a.data[index].copy()

    def backward(g):
        gx = np.zeros(src, dtype=dtype)
        gx[index] = g
        return (gx,)

    return _make(out, (a,), backward, "slice")


# ---------------------------------------------------------------------------
# graph traversal


def trace(root: Tensor) -> list[Tensor]:
    """Every recorded node reachable from root, in topological (id) order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None):
    """Reverse sweep from a scalar loss.

    With ``leaves`` given, returns a list of gradient arrays aligned with it
    (zeros for leaves the loss does not touch).  Otherwise returns a dict
    mapping each reachable tracked leaf to its gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    found: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        for node in reversed(trace(loss)):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                found[node] = np.array(g, dtype=node.dtype)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = np.asarray(pg, dtype=parent.dtype)
    if leaves is None:
        return found
    return [found[t] if t in found else np.zeros(t.shape, dtype=t.dtype) for t in leaves]


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    """Analytic vs central-difference gradients, one array triple per input."""

    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    rel_error: list[np.ndarray]
    tolerance: float
    step: float
    labels: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((float(e.max()) for e in self.rel_error if e.size), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> list[str]:
        names = self.labels or [f"input{i}" for i in range(len(self.rel_error))]
        return [n for n, e in zip(names, self.rel_error) if e.size and e.max() >= self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-4,
    labels: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare backward() against element-wise central differences.

    ``f`` maps the inputs (double precision) to a scalar Tensor.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    tracked = [Tensor(x.data, requires_grad=True, dtype=np.float64) for x in xs]
    analytic = backward(f(*tracked), tracked)

    base = [t.data for t in tracked]
    numeric = []
    with no_grad():
        for i, x0 in enumerate(base):
            num = np.zeros_like(x0)
            flat = x0.reshape(-1)
            for j in range(flat.size):
                probe = flat.copy()
                probe[j] = flat[j] + step
                args = [_wrap(b) for b in base]
                args[i] = _wrap(probe.reshape(x0.shape))
                up = f(*args).item()
                probe[j] = flat[j] - step
                args[i] = _wrap(probe.reshape(x0.shape))
                down = f(*args).item()
                num.reshape(-1)[j] = (up - down) / (2 * step)
            numeric.append(num)
    errors = [relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
    return GradCheckReport(analytic, numeric, errors, tolerance, step, list(labels or []))
