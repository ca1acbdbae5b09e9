"""Small reverse-mode autodiff engine over float64 numpy arrays.

Expressions are immutable DAGs of :class:`Expr` nodes. Nothing is cached on
the nodes themselves, so one expression can be evaluated concurrently with
different bindings.

    >>> w = var("w")
    >>> evaluate(sum_(w * w), {"w": [3.0, 4.0]})
    25.0
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NumericError, ShapeError, UnboundVariableError

_ids = itertools.count()


class Expr:
    __slots__ = ("op", "args", "attrs", "id")

    def __init__(self, op: str, args: tuple["Expr", ...] = (), **attrs):
        self.op = op
        self.args = args
        self.attrs = attrs
        self.id = next(_ids)

    def __repr__(self) -> str:
        if self.op == "var":
            return f"var({self.attrs['name']!r})"
        if self.op == "const":
            return f"const(shape={np.shape(self.attrs['value'])})"
        return f"{self.op}(#{self.id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


# ---------------------------------------------------------------- builders


def var(name: str) -> Expr:
    return Expr("var", name=name)


def const(value) -> Expr:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return Expr("const", value=arr)


def add(a, b) -> Expr:
    return Expr("add", (_lift(a), _lift(b)))


def sub(a, b) -> Expr:
    return Expr("sub", (_lift(a), _lift(b)))


def mul(a, b) -> Expr:
    return Expr("mul", (_lift(a), _lift(b)))


def scale(a, c: float) -> Expr:
    return Expr("scale", (_lift(a),), c=float(c))


def matmul(a, b) -> Expr:
    return Expr("matmul", (_lift(a), _lift(b)))


def transpose(a) -> Expr:
    return Expr("transpose", (_lift(a),))


def relu(a) -> Expr:
    return Expr("relu", (_lift(a),))


# hinge terms read better as max(0, .); same op
max0 = relu


def exp(a) -> Expr:
    return Expr("exp", (_lift(a),))


def log(a) -> Expr:
    return Expr("log", (_lift(a),))


def logsumexp(a, axis: int | None = None, keepdims: bool = False) -> Expr:
    return Expr("logsumexp", (_lift(a),), axis=axis, keepdims=keepdims)


def sqnorm(a, axis: int | None = None, keepdims: bool = False) -> Expr:
    """Squared L2 norm, over everything or along one axis."""
    return Expr("sqnorm", (_lift(a),), axis=axis, keepdims=keepdims)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Expr:
    return Expr("sum", (_lift(a),), axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Expr:
    return Expr("mean", (_lift(a),), axis=axis, keepdims=keepdims)


def normalize_rows(a) -> Expr:
    """L2-normalize along the last axis. Zero-norm rows are an error."""
    return Expr("normalize_rows", (_lift(a),))


# ---------------------------------------------------------------- kernels


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _expand(grad, in_shape, axis, keepdims):
    # re-insert a reduced axis so grad broadcasts against the input
    if axis is None:
        return np.broadcast_to(grad, in_shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, in_shape)


def _fwd_matmul(a, b):
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ValueError(f"matmul needs 1-D or 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _bwd_matmul(g, a, b):
    a2 = a.reshape(1, -1) if a.ndim == 1 else a
    b2 = b.reshape(-1, 1) if b.ndim == 1 else b
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def _fwd_lse(a, axis, keepdims):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def _bwd_lse(g, a, out, axis, keepdims):
    o = out if keepdims else (np.expand_dims(out, axis) if axis is not None else out)
    return _expand(g, a.shape, axis, keepdims) * np.exp(a - o)


def _fwd_normalize(a):
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise NumericError("zero-norm row: L2 normalization undefined")
    return a / norms


def _bwd_normalize(g, a, out):
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    return (g - out * np.sum(g * out, axis=-1, keepdims=True)) / norms


def _fwd_log(a):
    if np.any(a <= 0):
        raise NumericError("log of a non-positive value")
    return np.log(a)


# op -> (forward(*arg_values, **attrs), backward(g, *arg_values, out, **attrs))
_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, a, b, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": (np.subtract, lambda g, a, b, out: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))),
    "mul": (
        np.multiply,
        lambda g, a, b, out: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "scale": (lambda a, c: a * c, lambda g, a, out, c: (g * c,)),
    "matmul": (_fwd_matmul, lambda g, a, b, out: _bwd_matmul(g, a, b)),
    "transpose": (lambda a: a.T, lambda g, a, out: (np.asarray(g).T,)),
    # relu'(0) := 0
    "relu": (lambda a: np.maximum(a, 0.0), lambda g, a, out: (g * (a > 0),)),
    "exp": (np.exp, lambda g, a, out: (g * out,)),
    "log": (_fwd_log, lambda g, a, out: (g / a,)),
    "logsumexp": (_fwd_lse, lambda g, a, out, axis, keepdims: (_bwd_lse(g, a, out, axis, keepdims),)),
    "sqnorm": (
        lambda a, axis, keepdims: np.sum(a * a, axis=axis, keepdims=keepdims),
        lambda g, a, out, axis, keepdims: (2.0 * a * _expand(g, a.shape, axis, keepdims),),
    ),
    "sum": (
        lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
        lambda g, a, out, axis, keepdims: (np.array(_expand(g, a.shape, axis, keepdims)),),
    ),
    "mean": (
        lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims),
        lambda g, a, out, axis, keepdims: (
            _expand(g, a.shape, axis, keepdims) / (a.size if axis is None else a.shape[axis]),
        ),
    ),
    "normalize_rows": (_fwd_normalize, lambda g, a, out: (_bwd_normalize(g, a, out),)),
}


# ---------------------------------------------------------------- evaluation


def topo_order(out: Expr) -> list[Expr]:
    """Nodes reachable from ``out``, every node after its inputs."""
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for arg in reversed(node.args):
            if arg.id not in seen:
                stack.append((arg, False))
    return order


def variables(out: Expr) -> set[str]:
    return {n.attrs["name"] for n in topo_order(out) if n.op == "var"}


def _forward(out: Expr, bindings: Mapping[str, object]) -> tuple[list[Expr], dict[int, np.ndarray]]:
    order = topo_order(out)
    values: dict[int, np.ndarray] = {}
    for k, node in enumerate(order):
        if node.op == "var":
            name = node.attrs["name"]
            if name not in bindings:
                raise UnboundVariableError(f"variable {name!r} is not bound")
            v = np.asarray(bindings[name], dtype=np.float64)
        elif node.op == "const":
            v = node.attrs["value"]
        else:
            fwd = _OPS[node.op][0]
            args = [values[a.id] for a in node.args]
            try:
                with np.errstate(over="raise", divide="raise", invalid="raise"):
                    v = np.asarray(fwd(*args, **node.attrs), dtype=np.float64)
            except NumericError as e:
                raise NumericError(f"node #{k} ({node.op}): {e}") from None
            except FloatingPointError as e:
                raise NumericError(f"node #{k} ({node.op}): {e}") from None
            except ValueError as e:
                shapes = ", ".join(str(a.shape) for a in args)
                raise ShapeError(f"node #{k} ({node.op}) with operand shapes [{shapes}]: {e}") from None
        if not np.all(np.isfinite(v)):
            raise NumericError(f"node #{k} ({node.op}) produced non-finite values")
        values[node.id] = v
    return order, values


def evaluate(out: Expr, bindings: Mapping[str, object]):
    """Forward value of ``out``; a Python float when the result is scalar."""
    _, values = _forward(out, bindings)
    v = values[out.id]
    return float(v) if v.ndim == 0 else v.copy()


def value_and_grad(
    out: Expr, bindings: Mapping[str, object], wrt: Iterable[str]
) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar value of ``out`` and its gradient for every name in ``wrt``."""
    wrt = list(wrt)
    for name in wrt:
        if name not in bindings:
            raise UnboundVariableError(f"cannot differentiate w.r.t. unknown variable {name!r}")
    order, values = _forward(out, bindings)
    result = values[out.id]
    if result.ndim != 0:
        raise ShapeError(f"gradient needs a scalar output, got shape {result.shape}")

    wanted = set(wrt)
    grads: dict[int, np.ndarray] = {out.id: np.ones(())}
    named = {name: np.zeros(np.shape(bindings[name]), dtype=np.float64) for name in wrt}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.op == "var":
            if node.attrs["name"] in wanted:
                named[node.attrs["name"]] += g
            continue
        if node.op == "const":
            continue
        bwd = _OPS[node.op][1]
        arg_grads = bwd(g, *(values[a.id] for a in node.args), values[node.id], **node.attrs)
        for arg, ag in zip(node.args, arg_grads):
            if arg.op == "const":
                continue
            if arg.id in grads:
                grads[arg.id] = grads[arg.id] + ag
            else:
                grads[arg.id] = ag
    return float(result), named


def gradient(out: Expr, bindings: Mapping[str, object], wrt: str) -> np.ndarray:
    return value_and_grad(out, bindings, [wrt])[1][wrt]


def finite_difference_check(
    out: Expr, bindings: Mapping[str, object], wrt: str, step: float = 1e-5
) -> float:
    """Max relative error between ``gradient`` and central differences.

    Entries smaller than the difference quotient can resolve (about
    1e-6 * max(1, |f|)) are compared against that floor instead of themselves.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradient(out, bindings, wrt)
    base = np.array(bindings[wrt], dtype=np.float64)
    shifted = dict(bindings)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for k in range(base.size):
        probe = base.copy().reshape(-1)
        probe[k] += step
        shifted[wrt] = probe.reshape(base.shape)
        f_plus = evaluate(out, shifted)
        probe[k] -= 2 * step
        shifted[wrt] = probe.reshape(base.shape)
        f_minus = evaluate(out, shifted)
        flat[k] = (f_plus - f_minus) / (2 * step)
    if base.size == 0:
        return 0.0
    # below this the central difference is mostly roundoff, so compare absolutely
    floor = max(1.0, abs(evaluate(out, bindings))) * max(1e-6, 1e4 * np.finfo(np.float64).eps / step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
