"""Small reverse-mode differentiation engine over numpy arrays.

Every differentiable operation is a registered primitive.  Primitives accept
plain numpy values as well as :class:`Tensor` nodes; when no argument is a
Tensor the primitive simply evaluates with numpy and returns an array, so the
same geometry/loss code serves both as a plain forward model and as a taped
graph for :func:`value_and_grad`.

All arithmetic is float64.  L1-type kinks use subgradient 0 at the kink.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Mapping

import numpy as np

PRIMITIVES: dict[str, Callable] = {}


class UnregisteredPrimitiveError(TypeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, primitive: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by primitive '{primitive}' ({where} pass)")
        self.primitive = primitive


_branch = threading.local()


@contextmanager
def branch_trace():
    """Collect the branch state of every kinked primitive evaluated in the block.

    Two evaluations whose traces are equal lie on the same smooth piece of the
    function, which is how gradient checks tell kinks from curvature.
    """
    prev = getattr(_branch, "log", None)
    _branch.log = []
    try:
        yield _branch.log
    finally:
        _branch.log = prev


def note_branch(state) -> None:
    trace = getattr(_branch, "log", None)
    if trace is not None:
        trace.append(np.array(state))


def _noting(f, branch):
    def g(*args):
        note_branch(branch(*args))
        return f(*args)

    return g


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        fn.primitive_name = name
        return fn

    return register


def lookup(name: str) -> Callable:
    try:
        return PRIMITIVES[name]
    except KeyError:
        raise UnregisteredPrimitiveError(f"primitive '{name}' is not registered with the engine") from None


class Tensor:
    """A node of the computation graph."""

    __slots__ = ("value", "parents", "backward", "op")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward = backward
        self.op = op

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    # numpy ufuncs applied to a Tensor land here; only the registered ones pass.
    _UFUNCS = {
        "add": "add", "subtract": "sub", "multiply": "mul", "true_divide": "div",
        "negative": "neg", "absolute": "abs", "sqrt": "sqrt", "exp": "exp",
        "log": "log", "tanh": "tanh", "arccos": "arccos",
        "minimum": "minimum", "maximum": "maximum",
    }

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        name = self._UFUNCS.get(ufunc.__name__)
        if method != "__call__" or name is None or kwargs:
            raise UnregisteredPrimitiveError(
                f"numpy ufunc '{ufunc.__name__}' is not a registered primitive")
        return lookup(name)(*inputs)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x):
    return x.value if isinstance(x, Tensor) else x


def _finite(v: np.ndarray) -> bool:
    if v.ndim == 0:
        return math.isfinite(v)
    # a sum is non-finite iff some entry is (or it overflows, which is just as bad)
    return math.isfinite(v.sum())


def _node(op: str, value, parents, backward) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not _finite(value):
        raise NonFiniteError(op)
    return Tensor(value, parents, backward, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _unary(name, f, df):
    """df(x, y) gives dy/dx elementwise."""

    @primitive(name)
    def op(x):
        if not isinstance(x, Tensor):
            return f(np.asarray(x, dtype=np.float64))
        with np.errstate(all="ignore"):  # non-finite results raise NonFiniteError below
            y = f(x.value)
        return _node(name, y, (x,), lambda g: (g * df(x.value, y),))

    op.__name__ = name
    return op


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_any(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return _sigmoid(x.reshape(1)).reshape(())
    return _sigmoid(x)


neg = _unary("neg", np.negative, lambda x, y: -1.0)
abs_ = _unary("abs", _noting(np.abs, np.sign), lambda x, y: np.sign(x))
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
sigmoid = _unary("sigmoid", _sigmoid_any, lambda x, y: y * (1.0 - y))
softplus = _unary("softplus", _softplus, lambda x, y: _sigmoid_any(x))
arccos = _unary("arccos", np.arccos, lambda x, y: -1.0 / np.sqrt(1.0 - x * x))
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
square = _unary("square", np.square, lambda x, y: 2.0 * x)


def _binary(name, f, dfa, dfb):
    @primitive(name)
    def op(a, b):
        ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
        if not (ta or tb):
            return f(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        av, bv = value_of(a), value_of(b)
        av = np.asarray(av, dtype=np.float64)
        bv = np.asarray(bv, dtype=np.float64)
        with np.errstate(all="ignore"):
            y = f(av, bv)

        def backward(g):
            ga = _unbroadcast(g * dfa(av, bv, y), av.shape) if ta else None
            gb = _unbroadcast(g * dfb(av, bv, y), bv.shape) if tb else None
            return ga, gb

        parents = (a if ta else None, b if tb else None)
        return _node(name, y, parents, backward)

    op.__name__ = name
    return op


add = _binary("add", np.add, lambda a, b, y: 1.0, lambda a, b, y: 1.0)
sub = _binary("sub", np.subtract, lambda a, b, y: 1.0, lambda a, b, y: -1.0)
mul = _binary("mul", np.multiply, lambda a, b, y: b, lambda a, b, y: a)
div = _binary("div", np.divide, lambda a, b, y: 1.0 / b, lambda a, b, y: -y / b)

def _atan2_da(a, b, y):
    r = a * a + b * b
    return np.where(r > 0, b / np.where(r > 0, r, 1.0), 0.0)


def _atan2_db(a, b, y):
    r = a * a + b * b
    return np.where(r > 0, -a / np.where(r > 0, r, 1.0), 0.0)


# atan2(a, b) = angle of the point (b, a)
atan2 = _binary("atan2", np.arctan2, _atan2_da, _atan2_db)
# ties route the gradient to the first argument
minimum = _binary("minimum", _noting(np.minimum, np.less_equal),
                  lambda a, b, y: (a <= b).astype(np.float64),
                  lambda a, b, y: (a > b).astype(np.float64))
maximum = _binary("maximum", _noting(np.maximum, np.greater_equal),
                  lambda a, b, y: (a >= b).astype(np.float64),
                  lambda a, b, y: (a < b).astype(np.float64))


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


@primitive("sum")
def sum_(x, axis=None):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis)
    shape = x.value.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", np.sum(x.value, axis=axis), (x,), backward)


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    return sum_(x, axis) / float(n)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


@primitive("getitem")
def getitem(x, index):
    if not isinstance(x, Tensor):
        return np.asarray(x)[index]
    shape = x.value.shape

    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node("getitem", x.value[index], (x,), backward)


@primitive("reshape")
def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.value.shape
    return _node("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


@primitive("stack")
def stack(items, axis=0):
    items = list(items)
    if not any(isinstance(t, Tensor) for t in items):
        return np.stack([np.asarray(t, dtype=np.float64) for t in items], axis=axis)
    values = [np.broadcast_to(np.asarray(value_of(t), dtype=np.float64),
                              np.shape(value_of(items[0]))) for t in items]
    y = np.stack(values, axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(_unbroadcast(parts[i], np.shape(value_of(t))) if isinstance(t, Tensor) else None
                     for i, t in enumerate(items))

    parents = tuple(t if isinstance(t, Tensor) else None for t in items)
    return _node("stack", y, parents, backward)


@primitive("matmul")
def matmul(a, b):
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.matmul(a, b)
    av = np.asarray(value_of(a), dtype=np.float64)
    bv = np.asarray(value_of(b), dtype=np.float64)

    def backward(g):
        ga = gb = None
        if isinstance(a, Tensor):
            ga = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
        if isinstance(b, Tensor):
            gb = av.T @ g
        return ga, gb

    parents = (a if isinstance(a, Tensor) else None, b if isinstance(b, Tensor) else None)
    return _node("matmul", av @ bv, parents, backward)


@primitive("transpose")
def transpose(x):
    if not isinstance(x, Tensor):
        return np.transpose(x)
    return _node("transpose", x.value.T, (x,), lambda g: (g.T,))


def where(cond, a, b):
    """Select with a constant boolean mask."""
    c = np.asarray(cond, dtype=np.float64)
    return a * c + b * (1.0 - c)


def make_primitive(name: str, forward: Callable, vjp: Callable) -> Callable:
    """Register a custom primitive.

    ``forward(*values) -> y`` and ``vjp(g, y, *values) -> tuple of grads``
    (one per input, ``None`` for non-differentiable inputs).
    """

    @primitive(name)
    def op(*args):
        if not any(isinstance(a, Tensor) for a in args):
            return forward(*args)
        vals = [value_of(a) for a in args]
        y = forward(*vals)

        def backward(g):
            grads = vjp(g, y, *vals)
            return tuple(gr if isinstance(a, Tensor) else None for a, gr in zip(args, grads))

        return _node(name, y, tuple(a if isinstance(a, Tensor) else None for a in args), backward)

    op.__name__ = name
    return op


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack_.append((p, False))
    return order


def backprop(root: Tensor) -> dict[int, np.ndarray]:
    """Return adjoints keyed by ``id(node)`` for every node reachable from ``root``."""
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_toposort(root)):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if not _finite(pg):
                raise NonFiniteError(node.op, "backward")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def value_and_grad(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(params)`` and its exact gradient w.r.t. every entry of ``params``."""
    leaves = {}
    for name, v in params.items():
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"parameter:{name}")
        leaves[name] = Tensor(v.copy())
    out = loss_fn(leaves)
    if not isinstance(out, Tensor):
        value = float(np.asarray(out))
        return value, {k: np.zeros_like(t.value) for k, t in leaves.items()}
    if out.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.value.shape}")
    grads = backprop(out)
    result = {k: grads.get(id(t), np.zeros_like(t.value)).reshape(t.value.shape) for k, t in leaves.items()}
    return float(out.value), result


def finite_diff_grad(loss_fn: Callable, params: Mapping[str, np.ndarray], eps: float = 1e-6) -> dict[str, np.ndarray]:
    """Central-difference gradient, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f(p):
        return float(np.asarray(value_of(loss_fn(p))))

    out = {}
    for name, v in base.items():
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(base)
            flat[i] = orig - eps
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out
