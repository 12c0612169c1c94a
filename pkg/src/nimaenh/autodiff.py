"""Reverse-mode automatic differentiation over n-dimensional float64 arrays.

Graphs are built from named leaves (``inp``/``param``), constants, and
derived operation nodes. ``evaluate`` runs the forward pass for a set of
bindings, ``gradient`` additionally runs the reverse pass, and
``grad_check`` compares analytic gradients against central finite
differences. Expressions are immutable after construction; evaluation is a
pure function of the bindings, so repeated runs are bit-identical.
"""

from __future__ import annotations

import itertools

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class UnboundInputError(AutodiffError):
    pass


class NonScalarRootError(AutodiffError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Float64 value container; ``grad`` is filled in by a backward pass."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ids = itertools.count()

# op name -> (forward, backward)
# forward(attrs, *operand_values) -> ndarray, or (ndarray, ctx) to stash
# intermediates for the reverse pass
# backward(attrs, out_grad, operand_values, out_value, ctx) -> tuple of
# grads (None entries mark operands that do not receive gradient).
_OPS = {}


def register_op(name, forward, backward):
    if name in _OPS:
        raise ValueError(f"op {name!r} already registered")
    _OPS[name] = (forward, backward)


class Expression:
    """One node of an acyclic expression graph.

    ``kind`` is "input", "parameter", "const", or "op". Leaves carry a
    ``name`` used to look up bindings; op nodes carry the op name, operand
    references, and op attributes.
    """

    __slots__ = ("kind", "name", "op", "operands", "attrs", "value", "uid")

    def __init__(self, kind, name=None, op=None, operands=(), attrs=None, value=None):
        self.kind = kind
        self.name = name
        self.op = op
        self.operands = tuple(operands)
        self.attrs = attrs or {}
        self.value = value
        self.uid = next(_ids)

    @property
    def label(self) -> str:
        if self.kind == "op":
            return f"{self.op}#{self.uid}"
        if self.kind == "const":
            return f"const#{self.uid}"
        return f"{self.kind}:{self.name}"

    def __repr__(self):
        return f"Expression({self.label})"

    def __add__(self, other):
        return apply_op("add", (self, lift(other)))

    def __radd__(self, other):
        return apply_op("add", (lift(other), self))

    def __sub__(self, other):
        return apply_op("sub", (self, lift(other)))

    def __rsub__(self, other):
        return apply_op("sub", (lift(other), self))

    def __mul__(self, other):
        return apply_op("mul", (self, lift(other)))

    def __rmul__(self, other):
        return apply_op("mul", (lift(other), self))

    def __neg__(self):
        return apply_op("neg", (self,))


def inp(name: str) -> Expression:
    """Named input leaf (not differentiated unless asked for via ``wrt``)."""
    return Expression("input", name=name)


def param(name: str) -> Expression:
    """Named parameter leaf; differentiated by default."""
    return Expression("parameter", name=name)


def const(value) -> Expression:
    """Constant leaf baked into the graph; receives no gradient."""
    return Expression("const", value=_as_array(value))


def lift(x) -> Expression:
    return x if isinstance(x, Expression) else const(x)


def apply_op(op_name, operands, **attrs) -> Expression:
    if op_name not in _OPS:
        raise ValueError(f"unknown op {op_name!r}")
    return Expression("op", op=op_name, operands=operands, attrs=attrs)


# ---------------------------------------------------------------------------
# core elementwise and reduction ops

def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"operand shapes {a.shape} and {b.shape} do not broadcast")


def _add_fwd(attrs, a, b):
    _check_broadcast(a, b)
    return a + b


def _add_bwd(attrs, g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(attrs, a, b):
    _check_broadcast(a, b)
    return a - b


def _sub_bwd(attrs, g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(attrs, a, b):
    _check_broadcast(a, b)
    return a * b


def _mul_bwd(attrs, g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _sum_fwd(attrs, a):
    return np.asarray(a.sum())


def _sum_bwd(attrs, g, vals, out, ctx):
    return (np.broadcast_to(g, vals[0].shape).copy(),)


def _mean_fwd(attrs, a):
    return np.asarray(a.mean())


def _mean_bwd(attrs, g, vals, out, ctx):
    a = vals[0]
    return (np.broadcast_to(g / a.size, a.shape).copy(),)


def _cumsum_fwd(attrs, a):
    if a.ndim != 1:
        raise ShapeMismatchError(f"cumsum expects a 1-d operand, got shape {a.shape}")
    return np.cumsum(a)


def _cumsum_bwd(attrs, g, vals, out, ctx):
    return (np.cumsum(g[::-1])[::-1],)


register_op("add", _add_fwd, _add_bwd)
register_op("sub", _sub_fwd, _sub_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("neg", lambda attrs, a: -a, lambda attrs, g, vals, out, ctx: (-g,))
register_op("sum", _sum_fwd, _sum_bwd)
register_op("mean", _mean_fwd, _mean_bwd)
register_op("cumsum", _cumsum_fwd, _cumsum_bwd)


def add(a, b):
    return apply_op("add", (lift(a), lift(b)))


def sub(a, b):
    return apply_op("sub", (lift(a), lift(b)))


def mul(a, b):
    return apply_op("mul", (lift(a), lift(b)))


def neg(a):
    return apply_op("neg", (lift(a),))


def sum(a):  # noqa: A001 - mirrors the public op name
    return apply_op("sum", (lift(a),))


def mean(a):
    return apply_op("mean", (lift(a),))


def cumsum(a):
    return apply_op("cumsum", (lift(a),))


# ---------------------------------------------------------------------------
# evaluation

def topo_order(root: Expression) -> list[Expression]:
    """Deterministic post-order over the graph (operands before users)."""
    order = []
    seen = set()
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
        for operand in reversed(node.operands):
            if id(operand) not in seen:
                stack.append((operand, False))
    return order


def _forward(order, bindings):
    values = {}
    ctxs = {}
    for node in order:
        if node.kind == "const":
            values[id(node)] = node.value
        elif node.kind in ("input", "parameter"):
            if bindings is None or node.name not in bindings:
                raise UnboundInputError(f"no binding for {node.label}")
            values[id(node)] = _as_array(bindings[node.name])
        else:
            fwd = _OPS[node.op][0]
            vals = [values[id(op)] for op in node.operands]
            try:
                out = fwd(node.attrs, *vals)
            except ShapeMismatchError as e:
                raise ShapeMismatchError(f"{node.label}: {e}") from None
            except ValueError as e:
                # bare numpy shape errors get labelled; domain errors pass through
                if type(e) is not ValueError:
                    raise
                raise ShapeMismatchError(f"{node.label}: {e}") from None
            if isinstance(out, tuple):
                values[id(node)], ctxs[id(node)] = out
            else:
                values[id(node)] = out
    return values, ctxs


def evaluate(root: Expression, bindings=None) -> Tensor:
    """Forward-evaluate ``root`` with leaf values taken from ``bindings``."""
    order = topo_order(root)
    values, _ = _forward(order, bindings)
    return Tensor(values[id(root)])


def _backward(order, values, ctxs, root):
    grads = {id(root): np.ones_like(values[id(root)])}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.kind != "op":
            continue
        bwd = _OPS[node.op][1]
        vals = [values[id(op)] for op in node.operands]
        operand_grads = bwd(node.attrs, g, vals, values[id(node)], ctxs.get(id(node)))
        for operand, og in zip(node.operands, operand_grads):
            if og is None or operand.kind == "const":
                continue
            acc = grads.get(id(operand))
            grads[id(operand)] = og if acc is None else acc + og
    return grads


def value_and_grad(root, bindings=None, wrt=None, aux=()):
    """One forward + one reverse pass.

    Returns ``(value, grads, aux_values)`` where ``grads`` maps leaf name
    to ndarray and ``aux_values`` are the cached forward values of the
    extra ``aux`` nodes (which must be part of the graph under ``root``).
    """
    order = topo_order(root)
    values, ctxs = _forward(order, bindings)
    root_val = values[id(root)]
    if root_val.size != 1:
        raise NonScalarRootError(f"root has shape {root_val.shape}; expected a scalar")
    grads_by_id = _backward(order, values, ctxs, root)

    leaves = {}
    for node in order:
        if node.kind in ("input", "parameter"):
            leaves.setdefault(node.name, []).append(node)
    if wrt is None:
        names = [n.name for n in order if n.kind == "parameter"]
        # preserve first-seen order, drop duplicates
        names = list(dict.fromkeys(names))
    else:
        names = list(wrt)

    grads = {}
    for name in names:
        if name in leaves:
            total = None
            for node in leaves[name]:
                g = grads_by_id.get(id(node))
                if g is None:
                    continue
                total = g if total is None else total + g
            if total is None:
                total = np.zeros_like(_as_array(bindings[name]))
            grads[name] = total
        else:
            if bindings is None or name not in bindings:
                raise UnboundInputError(f"no binding for requested leaf {name!r}")
            grads[name] = np.zeros_like(_as_array(bindings[name]))
    aux_values = [values[id(node)] for node in aux]
    return float(root_val), grads, aux_values


def gradient(root: Expression, bindings=None, wrt=None) -> dict:
    """Gradients of a scalar ``root`` w.r.t. parameter leaves.

    ``wrt`` may name any leaves (inputs included); names absent from the
    graph yield zero tensors shaped like their bindings. When a binding is
    a ``Tensor``, its ``grad`` field is populated as well.
    """
    _, grads, _ = value_and_grad(root, bindings, wrt=wrt)
    out = {}
    for name, g in grads.items():
        out[name] = Tensor(g)
        bound = bindings.get(name) if bindings else None
        if isinstance(bound, Tensor):
            bound.grad = g
    return out


def grad_check(root: Expression, bindings, step: float = 1e-5, wrt=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads, _ = value_and_grad(root, bindings, wrt=wrt)
    arrays = {k: _as_array(v).copy() for k, v in bindings.items()}
    max_err = 0.0
    for name, analytic in grads.items():
        arr = arrays[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = float(evaluate(root, arrays).data)
            arr[idx] = orig - step
            f_minus = float(evaluate(root, arrays).data)
            arr[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[idx] if analytic.ndim else float(analytic)
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
    return max_err
