"""Dense float64 arithmetic with a small reverse-mode tape.

Every value is a :class:`Tensor` wrapping a float64 ndarray. Operations record
their vector-Jacobian products on the result; :func:`gradient` walks the graph
backwards. The primitive set is closed and deliberately small: it covers the
alignment losses, the proxy generator and the task head, nothing more.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DegenerateInputError",
    "NonFiniteError",
    "Tensor",
    "Parameter",
    "custom_op",
    "as_tensor",
    "constant",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "swap",
    "reshape",
    "take",
    "concat",
    "tsum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "hinge",
    "softplus",
    "softmax",
    "log_softmax",
    "var",
    "l2_normalize",
    "cosine_matrix",
    "cosine",
    "gradient",
    "GradCheckReport",
    "finite_difference_check",
]


class DegenerateInputError(ValueError):
    """Raised for inputs where the math is undefined (e.g. zero-norm vectors)."""


class NonFiniteError(FloatingPointError):
    """A primitive produced inf/nan; ``primitive`` names the offender."""

    def __init__(self, primitive: str, phase: str = "forward"):
        self.primitive = primitive
        self.phase = phase
        super().__init__(f"non-finite value in {phase} pass of primitive '{primitive}'")


_ids = itertools.count()


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "op", "parents", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, value, op: str = "const", parents: tuple = (), requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return swap(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A trainable leaf. ``pid`` is unique per process."""

    __slots__ = ("pid", "name")

    def __init__(self, value, name: str | None = None, requires_grad: bool = True):
        super().__init__(np.array(value, dtype=np.float64, copy=True), op="param", requires_grad=requires_grad)
        self.pid = next(_ids)
        self.name = name if name is not None else f"p{self.pid}"

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"

    def __hash__(self):
        return hash(self.pid)

    def __eq__(self, other):
        return self is other


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _check(name: str, value: np.ndarray, phase: str = "forward") -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(name, phase)


def custom_op(name: str, value, parents: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Build a node from ``value`` and ``(parent, vjp)`` pairs.

    Each ``vjp`` maps the upstream gradient (shape of ``value``) to the
    gradient w.r.t. that parent. Parents that need no gradient are dropped.
    """
    value = np.asarray(value, dtype=np.float64)
    _check(name, value)
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    return Tensor(value, op=name, parents=live, requires_grad=bool(live))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def detach(x) -> Tensor:
    return Tensor(as_tensor(x).value)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("add", a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("sub", a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("mul", a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return custom_op("div", out, [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    ])


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op("neg", -a.value, [(a, lambda g: -g)])


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return custom_op("exp", out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return custom_op("log", out, [(a, lambda g: g / a.value)])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore"):
            r = g / (2.0 * out)
        _check("sqrt", r, "backward")
        return r

    return custom_op("sqrt", out, [(a, vjp)])


def square(a) -> Tensor:
    a = as_tensor(a)
    return custom_op("square", a.value * a.value, [(a, lambda g: 2.0 * g * a.value)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return custom_op("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def hinge(a) -> Tensor:
    """max(0, a)."""
    a = as_tensor(a)
    on = a.value > 0
    return custom_op("hinge", np.where(on, a.value, 0.0), [(a, lambda g: g * on)])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_array(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow; branch at 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return custom_op("softplus", softplus_array(a.value), [(a, lambda g: g * _sigmoid(a.value))])


# ------------------------------------------------------------ structural ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value @ b.value

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)

    return custom_op("matmul", out, [(a, ga), (b, gb)])


def swap(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return custom_op("swap", np.swapaxes(a.value, -1, -2), [(a, lambda g: np.swapaxes(g, -1, -2))])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom_op("reshape", a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def take(a, index) -> Tensor:
    """Numpy-style indexing; the backward pass scatters with accumulation."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return out

    return custom_op("take", a.value[index], [(a, vjp)])


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])
    pairs = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(lo, hi)
        pairs.append((p, lambda g, sl=tuple(sl): g[sl]))
    return custom_op("concat", out, pairs)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return custom_op("sum", out, [(a, vjp)])


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ------------------------------------------------------------- normalizers

def softmax_array(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        if not np.all(np.any(mask, axis=axis)):
            raise DegenerateInputError("softmax slice is fully masked")
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. Masked-out entries (``mask == False``) are exactly 0."""
    a = as_tensor(a)
    s = softmax_array(a.value, axis=axis, mask=mask)
    return custom_op("softmax", s, [(a, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True)))])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return custom_op("log_softmax", out, [(a, lambda g: g - s * g.sum(axis=axis, keepdims=True))])


def var(a, axis: int = -1) -> Tensor:
    """Population variance (ddof=0) along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    c = a.value - a.value.mean(axis=axis, keepdims=True)
    out = (c * c).mean(axis=axis)
    return custom_op("var", out, [(a, lambda g: np.expand_dims(g, axis) * (2.0 / n) * c)])


def l2_normalize(a, axis: int = -2) -> Tensor:
    """Scale slices along ``axis`` to unit norm (columns by default)."""
    a = as_tensor(a)
    norm = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("zero-norm vector passed to l2_normalize")
    y = a.value / norm
    return custom_op("l2_normalize", y, [(a, lambda g: (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)])


def cosine_matrix(a, b) -> Tensor:
    """Cosine similarities between the columns of ``a`` (..., d, n) and ``b`` (..., d, m)."""
    return matmul(swap(l2_normalize(a, axis=-2)), l2_normalize(b, axis=-2))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    su, sv = np.abs(u).max(initial=0.0), np.abs(v).max(initial=0.0)
    if su == 0.0 or sv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    u, v = u / su, v / sv  # rescale first so tiny inputs do not underflow
    return float(np.clip(np.dot(u / np.linalg.norm(u), v / np.linalg.norm(v)), -1.0, 1.0))


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradient(expr: Tensor, params: Iterable[Parameter]) -> dict[Parameter, np.ndarray]:
    """Reverse-mode gradients of scalar ``expr``.

    Parameters the expression does not reach get zero arrays.
    """
    params = list(params)
    if expr.value.size != 1:
        raise ValueError(f"gradient needs a scalar expression, got shape {expr.shape}")
    _check(expr.op, expr.value)
    grads: dict[int, np.ndarray] = {id(expr): np.ones_like(expr.value)}
    for node in reversed(_toposort(expr)):
        g = grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            _check(node.op, pg, "backward")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    step: float
    worst: tuple[str, tuple] | None = None
    n_checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``fn`` must rebuild the expression from the current parameter values.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradient(fn(), params)
    worst_err, worst = 0.0, None
    per_param = {}
    checked = 0
    for p in params:
        a = analytic[p]
        base = p.value.copy()
        perr = 0.0
        for idx in np.ndindex(*base.shape):
            plus = base.copy()
            plus[idx] += step
            p.value = plus
            fp = fn().item()
            minus = base.copy()
            minus[idx] -= step
            p.value = minus
            fm = fn().item()
            p.value = base
            num = (fp - fm) / (2.0 * step)
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), floor)
            checked += 1
            perr = max(perr, err)
            if err > worst_err:
                worst_err, worst = err, (p.name, idx)
        per_param[p.name] = perr
    return GradCheckReport(worst_err, worst_err <= tol, tol, step, worst, checked, per_param)
