"""Symbolic reverse-mode differentiation over small vector/matrix graphs.

Expressions are immutable DAGs of :class:`Expr` nodes. :func:`differentiate`
returns derivative *expressions* rather than numbers, so a derivative can be
differentiated again. That is what objectives containing input gradients of a
model need when they are differentiated with respect to its parameters.

Values are float64 numpy arrays of rank 0, 1 or 2. Broadcasting is limited to
a scalar operand in ``mul``/``div``; everything else must match exactly.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

__all__ = [
    "Expr",
    "Bindings",
    "DiffError",
    "UnboundVariableError",
    "ShapeError",
    "NonFiniteError",
    "UnsupportedNodeError",
    "var",
    "const",
    "zeros",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matvec",
    "outer",
    "transpose",
    "dot",
    "sqnorm",
    "sqrt",
    "log",
    "total",
    "clip",
    "activation",
    "relu",
    "softplus",
    "sigmoid",
    "tanh",
    "free_variables",
    "evaluate",
    "differentiate",
    "substitute",
    "check_gradient",
]

Shape = tuple
Bindings = Mapping[str, Union[float, np.ndarray]]

ACTIVATIONS = ("relu", "softplus", "sigmoid", "tanh", "identity", "step")


class DiffError(Exception):
    """Base class for engine errors."""


class UnboundVariableError(DiffError, KeyError):
    pass


class ShapeError(DiffError, ValueError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


class UnsupportedNodeError(DiffError, TypeError):
    pass


class Expr:
    """A node in a computation graph.

    ``kind`` names the operation, ``args`` are operand nodes and ``data``
    carries per-kind payload (variable name, constant value, activation
    name, clip bounds).
    """

    __slots__ = ("kind", "args", "shape", "data")

    def __init__(self, kind: str, args: tuple, shape: Shape, data=None):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "shape", tuple(shape))
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    def __repr__(self):
        if self.kind == "var":
            return f"var({self.data[0]!r}, shape={self.shape})"
        if self.kind == "const":
            return f"const(shape={self.shape})"
        return f"{self.kind}({', '.join(a.kind for a in self.args)})"

    @property
    def name(self) -> str:
        if self.kind != "var":
            raise AttributeError("only variables have names")
        return self.data[0]

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        if len(self.shape) == 1 and len(other.shape) == 1:
            return dot(self, other)
        return matvec(self, other)


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


# -- constructors -----------------------------------------------------------


def var(name: str, shape: Shape = (), role: str = "param") -> Expr:
    """A free variable. ``role`` is informational ("input" or "param")."""
    if role not in ("input", "param"):
        raise ValueError(f"unknown variable role {role!r}")
    shape = tuple(int(s) for s in shape)
    if len(shape) > 2 or any(s < 1 for s in shape):
        raise ShapeError(f"unsupported variable shape {shape}")
    return Expr("var", (), shape, (name, role))


def const(value) -> Expr:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError("constants must have rank <= 2")
    arr.setflags(write=False)
    return Expr("const", (), arr.shape, arr)


def zeros(shape: Shape) -> Expr:
    return const(np.zeros(shape))


def _is_zero(e: Expr) -> bool:
    return e.kind == "const" and not np.any(e.data)


def add(a: Expr, b: Expr) -> Expr:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return Expr("add", (a, b), a.shape)


def neg(a: Expr) -> Expr:
    return mul(const(-1.0), a)


def sub(a: Expr, b: Expr) -> Expr:
    return add(a, neg(b))


def mul(a: Expr, b: Expr) -> Expr:
    """Elementwise product; one operand may be a scalar."""
    if a.shape == b.shape or b.shape == ():
        shape = a.shape
    elif a.shape == ():
        shape = b.shape
    else:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return Expr("mul", (a, b), shape)


def div(a: Expr, b: Expr) -> Expr:
    """Elementwise quotient; the denominator may be a scalar."""
    if b.shape not in ((), a.shape):
        raise ShapeError(f"div: {a.shape} / {b.shape}")
    return Expr("div", (a, b), a.shape)


def matvec(A: Expr, v: Expr) -> Expr:
    if len(A.shape) != 2 or len(v.shape) != 1 or A.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {A.shape} @ {v.shape}")
    return Expr("matvec", (A, v), (A.shape[0],))


def outer(u: Expr, v: Expr) -> Expr:
    if len(u.shape) != 1 or len(v.shape) != 1:
        raise ShapeError(f"outer: {u.shape}, {v.shape}")
    return Expr("outer", (u, v), (u.shape[0], v.shape[0]))


def transpose(A: Expr) -> Expr:
    if len(A.shape) != 2:
        raise ShapeError(f"transpose: {A.shape}")
    return Expr("transpose", (A,), (A.shape[1], A.shape[0]))


def dot(a: Expr, b: Expr) -> Expr:
    if len(a.shape) != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} . {b.shape}")
    return Expr("dot", (a, b), ())


def sqnorm(a: Expr) -> Expr:
    return Expr("sqnorm", (a,), ())


def sqrt(a: Expr) -> Expr:
    return Expr("sqrt", (a,), a.shape)


def log(a: Expr) -> Expr:
    return Expr("log", (a,), a.shape)


def total(a: Expr) -> Expr:
    """Sum of all entries."""
    return Expr("sum", (a,), ())


def clip(a: Expr, lo: float, hi: float) -> Expr:
    if not lo < hi:
        raise ValueError("clip requires lo < hi")
    return Expr("clip", (a,), a.shape, (float(lo), float(hi)))


def _between(a: Expr, lo: float, hi: float) -> Expr:
    # 1 where lo < a < hi, else 0; derivative-free indicator
    return Expr("between", (a,), a.shape, (float(lo), float(hi)))


def activation(kind: str, a: Expr) -> Expr:
    if kind not in ACTIVATIONS:
        raise UnsupportedNodeError(f"unknown activation {kind!r}")
    if kind == "identity":
        return a
    if kind == "step":
        return _between(a, 0.0, math.inf)
    return Expr("act", (a,), a.shape, kind)


def relu(a: Expr) -> Expr:
    return activation("relu", a)


def softplus(a: Expr) -> Expr:
    return activation("softplus", a)


def sigmoid(a: Expr) -> Expr:
    return activation("sigmoid", a)


def tanh(a: Expr) -> Expr:
    return activation("tanh", a)


# -- traversal --------------------------------------------------------------


def _topo(roots: Sequence[Expr]) -> list:
    """Operands-before-users order, iterative to survive deep graphs."""
    order, seen = [], set()
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for arg in reversed(node.args):
            if id(arg) not in seen:
                stack.append((arg, False))
    return order


def free_variables(e: Expr) -> dict:
    """Map of variable name to its node."""
    out = {}
    for node in _topo([e]):
        if node.kind == "var":
            prev = out.setdefault(node.name, node)
            if prev.shape != node.shape:
                raise ShapeError(f"variable {node.name!r} used with two shapes")
    return out


# -- evaluation -------------------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


_ACT_FN = {
    "relu": lambda z: np.maximum(z, 0.0),
    "softplus": _softplus,
    "sigmoid": expit,
    "tanh": np.tanh,
}


def _eval_node(node: Expr, vals, bindings: Bindings):
    k = node.kind
    if k == "var":
        name = node.name
        if name not in bindings:
            raise UnboundVariableError(name)
        v = np.asarray(bindings[name], dtype=np.float64)
        if v.shape != node.shape:
            raise ShapeError(f"binding {name!r} has shape {v.shape}, expected {node.shape}")
        return v
    if k == "const":
        return node.data
    a = [vals[id(x)] for x in node.args]
    if k == "add":
        return a[0] + a[1]
    if k == "mul":
        return a[0] * a[1]
    if k == "div":
        return a[0] / a[1]
    if k == "matvec":
        return a[0] @ a[1]
    if k == "outer":
        return np.outer(a[0], a[1])
    if k == "transpose":
        return a[0].T
    if k == "dot":
        return np.dot(a[0], a[1])
    if k == "sqnorm":
        return np.sum(a[0] * a[0])
    if k == "sqrt":
        return np.sqrt(a[0])
    if k == "log":
        return np.log(a[0])
    if k == "sum":
        return np.sum(a[0])
    if k == "clip":
        lo, hi = node.data
        return np.clip(a[0], lo, hi)
    if k == "between":
        lo, hi = node.data
        return ((a[0] > lo) & (a[0] < hi)).astype(np.float64)
    if k == "act":
        return _ACT_FN[node.data](a[0])
    raise UnsupportedNodeError(k)


def evaluate(e: Expr, b: Bindings):
    """Value of ``e`` under bindings ``b``.

    Returns a Python float for scalar expressions and an ndarray otherwise.
    """
    vals = {}
    with np.errstate(all="ignore"):
        for node in _topo([e]):
            v = _eval_node(node, vals, b)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite value at {node!r}")
            vals[id(node)] = v
    out = vals[id(e)]
    return float(out) if np.ndim(out) == 0 else np.array(out)


# -- differentiation --------------------------------------------------------


def _act_derivative(kind: str, z: Expr, out: Expr) -> Expr:
    if kind == "relu":
        return _between(z, 0.0, math.inf)
    if kind == "softplus":
        return sigmoid(z)
    if kind == "sigmoid":
        return mul(out, sub(const(np.ones(out.shape)), out))
    if kind == "tanh":
        return sub(const(np.ones(out.shape)), mul(out, out))
    raise UnsupportedNodeError(kind)


def _unbroadcast(g: Expr, shape: Shape) -> Expr:
    return total(g) if shape == () and g.shape != () else g


def _vjp(node: Expr, g: Expr):
    """Yield (operand, adjoint contribution) pairs."""
    k = node.kind
    args = node.args
    if k == "add":
        yield args[0], g
        yield args[1], g
    elif k == "mul":
        a, b = args
        yield a, _unbroadcast(mul(g, b), a.shape)
        yield b, _unbroadcast(mul(g, a), b.shape)
    elif k == "div":
        a, b = args
        yield a, div(g, b)
        yield b, _unbroadcast(neg(div(mul(g, node), b)), b.shape)
    elif k == "matvec":
        A, v = args
        yield A, outer(g, v)
        yield v, matvec(transpose(A), g)
    elif k == "outer":
        u, v = args
        yield u, matvec(g, v)
        yield v, matvec(transpose(g), u)
    elif k == "transpose":
        yield args[0], transpose(g)
    elif k == "dot":
        a, b = args
        yield a, mul(g, b)
        yield b, mul(g, a)
    elif k == "sqnorm":
        yield args[0], mul(mul(const(2.0), g), args[0])
    elif k == "sqrt":
        yield args[0], div(g, mul(const(2.0), node))
    elif k == "log":
        yield args[0], div(g, args[0])
    elif k == "sum":
        a = args[0]
        yield a, mul(g, const(np.ones(a.shape)))
    elif k == "clip":
        lo, hi = node.data
        yield args[0], mul(g, _between(args[0], lo, hi))
    elif k == "act":
        yield args[0], mul(g, _act_derivative(node.data, args[0], node))
    elif k in ("between", "const", "var"):
        return
    else:
        raise UnsupportedNodeError(k)


def differentiate(e: Expr, wrt: Iterable[Union[str, Expr]]) -> dict:
    """Derivative expressions of scalar ``e`` w.r.t. each variable in ``wrt``.

    Returns ``{name: Expr}``; each result has its variable's shape and is an
    ordinary expression, so it may be differentiated again. Relu uses the
    derivative 0 at exactly 0.
    """
    if e.shape != ():
        raise ShapeError("differentiate needs a scalar expression")
    wrt = list(wrt)
    fv = free_variables(e)
    absent = {}
    for w in wrt:
        if isinstance(w, Expr):
            if w.kind != "var":
                raise UnsupportedNodeError("can only differentiate w.r.t. variables")
            if w.name not in fv:
                absent[w.name] = w.shape
        elif w not in fv:
            raise UnboundVariableError(f"{w!r} does not occur in the expression")
    names = [w.name if isinstance(w, Expr) else str(w) for w in wrt]
    order = _topo([e])
    adj = {id(e): const(1.0)}
    for node in reversed(order):
        g = adj.pop(id(node), None) if node.kind != "var" else adj.get(id(node))
        if g is None or _is_zero(g):
            continue
        for arg, contrib in _vjp(node, g):
            if arg.kind == "const" or _is_zero(contrib):
                continue
            prev = adj.get(id(arg))
            adj[id(arg)] = contrib if prev is None else add(prev, contrib)
    out = {}
    for name in names:
        if name in absent:
            out[name] = zeros(absent[name])
            continue
        # the same variable may appear as several distinct nodes
        parts = [adj[id(n)] for n in order if n.kind == "var" and n.name == name and id(n) in adj]
        if not parts:
            out[name] = zeros(fv[name].shape)
            continue
        acc = parts[0]
        for p in parts[1:]:
            acc = add(acc, p)
        out[name] = acc
    return out


def substitute(e: Expr, mapping: Mapping[str, object]) -> Expr:
    """Replace variables by constants (or other expressions)."""
    repl = {}
    for name, value in mapping.items():
        repl[name] = value if isinstance(value, Expr) else const(value)
    new = {}
    for node in _topo([e]):
        if node.kind == "var" and node.name in repl:
            r = repl[node.name]
            if r.shape != node.shape:
                raise ShapeError(f"substitute {node.name!r}: {r.shape} vs {node.shape}")
            new[id(node)] = r
        elif not node.args:
            new[id(node)] = node
        else:
            args = tuple(new[id(a)] for a in node.args)
            if all(x is y for x, y in zip(args, node.args)):
                new[id(node)] = node
            else:
                new[id(node)] = Expr(node.kind, args, node.shape, node.data)
    return new[id(e)]


def check_gradient(e: Expr, b: Bindings, wrt: Iterable[Union[str, Expr]], h: float = 1e-5) -> float:
    """Worst relative error between symbolic and central-difference gradients.

    The relative error of each component uses ``max(1, |analytic|)`` as the
    denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = differentiate(e, wrt)
    base = {k: np.array(v, dtype=np.float64) for k, v in b.items()}
    worst = 0.0
    for name, gexpr in grads.items():
        analytic = np.atleast_1d(np.asarray(evaluate(gexpr, base), dtype=np.float64)).ravel()
        x0 = base[name]
        flat = np.atleast_1d(x0).ravel()
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            fp = evaluate(e, {**base, name: plus.reshape(np.shape(x0))})
            fm = evaluate(e, {**base, name: minus.reshape(np.shape(x0))})
            numeric = (fp - fm) / (2.0 * h)
            err = abs(numeric - analytic[i]) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
