"""Small reverse-mode automatic differentiation over NumPy arrays.

Sized for the networks in this package: a few dense layers, batches of a
few thousand frames, and a fused RK4 primitive (see ``latent``). Values are
float64 throughout.

A ``Tensor`` wraps an array together with the recipe to push a gradient back
to its parents. Leaves created with ``requires_grad=True`` are trainable;
everything computed from them is recorded. ``gradients`` walks the recorded
graph once in reverse topological order. Intermediate gradients live in a
dict local to that walk, so a finished graph is never mutated and may be
differentiated more than once.

Forward-mode Jacobian-vector products use ``Dual`` pairs of tensors. A
function written with the module-level ops (``matmul``, ``sin``, ``+`` ...)
accepts a ``Dual`` unchanged, and because both halves of the pair are
ordinary recorded tensors, a JVP can itself be differentiated in reverse
mode.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteGradientError, ShapeError

_node_counter = 0


def _next_id():
    global _node_counter
    _node_counter += 1
    return _node_counter


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad", "id")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.id = _next_id()

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.value)

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
        if isinstance(other, (Tensor, Dual)):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward_fn, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn, op)
    return Tensor(value, op=op)


def custom_op(value, parents, backward_fn, op="custom"):
    """Register a new primitive.

    ``backward_fn(g)`` receives the upstream gradient (same shape as
    ``value``) and returns one gradient per parent, or ``None`` for parents
    that do not need one.
    """
    return _result(value, parents, backward_fn, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- primitives


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual.lift(a) + Dual.lift(b)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual.lift(a) - Dual.lift(b)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual.lift(a) * Dual.lift(b)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        )

    return _result(a.value * b.value, (a, b), backward, "mul")


def matmul(a, b):
    if isinstance(a, Dual):
        return Dual(matmul(a.primal, b), matmul(a.tangent, b))
    if isinstance(b, Dual):
        raise TypeError("dual numbers are supported on the left of matmul only")
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (
            g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None,
        )

    return _result(a.value @ b.value, (a, b), backward, "matmul")


def affine(x, W, c):
    """``x @ W + c`` as one node (the layer primitive of the MLPs)."""
    if isinstance(x, Dual):
        return Dual(affine(x.primal, W, c), matmul(x.tangent, W))
    x, W, c = as_tensor(x), as_tensor(W), as_tensor(c)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or c.shape != (W.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {x.shape}, {W.shape}, {c.shape}")
    value = x.value @ W.value
    value += c.value

    def backward(g):
        return (
            g @ W.value.T if x.requires_grad else None,
            x.value.T @ g if W.requires_grad else None,
            g.sum(axis=0) if c.requires_grad else None,
        )

    return _result(value, (x, W, c), backward, "affine")


def weighted_row_penalty(pred, target, row_weights, kind="mae"):
    """sum_r w_r * sum_j |pred - target|_rj (or squared) as one node.

    ``target`` and ``row_weights`` are constants; this fuses the
    subtract / abs / reduce chain that dominates the loss cost on wide frames.
    """
    pred = as_tensor(pred)
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=float)
    w = np.asarray(row_weights, dtype=float)
    if pred.shape != target.shape or w.shape not in ((pred.shape[0],), ()):
        raise ShapeError(f"penalty: prediction {pred.shape}, target {target.shape}, weights {w.shape}")
    d = pred.value - target
    wcol = w[:, None] if w.ndim else w
    if kind == "mae":
        value = float(np.sum(np.abs(d).sum(axis=1) * w))

        def backward(g):
            return (np.sign(d) * (g * wcol),)
    elif kind == "mse":
        value = float(np.sum((d * d).sum(axis=1) * w))

        def backward(g):
            return (2.0 * d * (g * wcol),)
    else:
        raise ValueError(f"unknown penalty {kind!r}")
    return _result(np.asarray(value), (pred,), backward, kind)


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.primal), mul(cos(x.primal), x.tangent))
    x = as_tensor(x)
    return _result(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),), "sin")


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.primal), mul(-1.0, mul(sin(x.primal), x.tangent)))
    x = as_tensor(x)
    return _result(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),), "cos")


def tabs(x):
    """Elementwise |x|; the subgradient at 0 is taken to be 0."""
    x = as_tensor(x)
    return _result(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def square(x):
    x = as_tensor(x)
    return _result(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.value, axis=axis), (x,), backward, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def getitem(x, index):
    if isinstance(x, Dual):
        return Dual(getitem(x.primal, index), getitem(x.tangent, index))
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    def backward_basic(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    basic = isinstance(index, (int, slice)) or (
        isinstance(index, tuple) and all(isinstance(i, (int, slice)) for i in index)
    )
    return _result(x.value[index], (x,), backward_basic if basic else backward, "getitem")


def concat(xs, axis=0):
    if any(isinstance(x, Dual) for x in xs):
        xs = [Dual.lift(x) for x in xs]
        return Dual(concat([x.primal for x in xs], axis), concat([x.tangent for x in xs], axis))
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))

    return _result(value, xs, backward, "concat")


def stack(xs, axis=0):
    return concat([reshape(as_tensor(x), _expand_shape(as_tensor(x).shape, axis)) for x in xs], axis)


def _expand_shape(shape, axis):
    shape = list(shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return tuple(shape)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x):
    x = as_tensor(x)
    return _result(x.value.T, (x,), lambda g: (g.T,), "transpose")


def linear_apply(matrix, x):
    """``matrix @ x`` for a fixed (dense or sparse) matrix.

    Used for finite-difference operators and interpolation along the time
    axis; the backward pass applies the transpose.
    """
    if isinstance(x, Dual):
        return Dual(linear_apply(matrix, x.primal), linear_apply(matrix, x.tangent))
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"linear_apply: matrix {matrix.shape} vs input {x.shape}")
    mt = matrix.T.tocsr() if sp.issparse(matrix) else matrix.T
    value = np.asarray(matrix @ x.value)
    return _result(value, (x,), lambda g: (np.asarray(mt @ g),), "linear_apply")


# ------------------------------------------------------------ forward mode


class Dual:
    """A (primal, tangent) pair of tensors for forward-mode evaluation."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = as_tensor(primal)
        self.tangent = as_tensor(tangent)
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(
                f"tangent shape {self.tangent.shape} does not match point {self.primal.shape}"
            )

    @staticmethod
    def lift(x):
        if isinstance(x, Dual):
            return x
        x = as_tensor(x)
        return Dual(x, np.zeros(x.shape))

    def __add__(self, other):
        other = Dual.lift(other)
        return Dual(add(self.primal, other.primal), add(self.tangent, other.tangent))

    __radd__ = __add__

    def __sub__(self, other):
        other = Dual.lift(other)
        return Dual(sub(self.primal, other.primal), sub(self.tangent, other.tangent))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                mul(self.primal, other.primal),
                add(mul(self.tangent, other.primal), mul(self.primal, other.tangent)),
            )
        return Dual(mul(self.primal, other), mul(self.tangent, other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def jvp(function, point, tangent):
    """Jacobian-vector product [D function(point)](tangent).

    ``function`` must be built from this module's ops. Returns
    ``(value, jvp)`` as tensors; both are recorded, so the product can be
    differentiated further in reverse mode.
    """
    point, tangent = as_tensor(point), as_tensor(tangent)
    if point.shape != tangent.shape:
        raise ShapeError(f"tangent shape {tangent.shape} does not match point {point.shape}")
    out = function(Dual(point, tangent))
    if not isinstance(out, Dual):
        out = Dual.lift(out)
    return out.primal, out.tangent


# ------------------------------------------------------------ reverse mode


def topological_order(output):
    """Nodes reachable from ``output`` that require gradients, inputs first."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def gradients(output, wrt, seed=None, order=None):
    """Gradients of ``output`` (seeded by ``seed``) with respect to ``wrt``."""
    if seed is None:
        if output.value.size != 1:
            raise ShapeError("a seed gradient is required for non-scalar outputs")
        seed = np.ones(output.shape)
    seed = np.asarray(seed, dtype=float)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output {output.shape}")
    if order is None:
        order = topological_order(output)
    grads = {output.id: seed}
    for node in reversed(order):
        g = grads.pop(node.id, None) if node.backward_fn is not None else grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return [grads.get(w.id, np.zeros(w.shape)) for w in wrt]


@dataclass
class Record:
    output: Tensor
    inputs: list
    order: list = field(default_factory=list)

    @property
    def value(self):
        return self.output.value

    def ops(self):
        return [n.op for n in self.order]


def record_forward(function, *inputs):
    """Evaluate ``function`` on fresh trainable leaves and keep the graph."""
    leaves = [Tensor(np.array(x, dtype=float), requires_grad=True) for x in inputs]
    out = as_tensor(function(*leaves))
    return out.value, Record(out, leaves, topological_order(out))


def backward(record, seed=None):
    return gradients(record.output, record.inputs, seed, record.order)


# ------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def reset(self, key):
        for d in (self.m, self.v, self.steps):
            d.pop(key, None)


def adam_step(params, grads, state, keys=None):
    """One bias-corrected Adam update, applied in place.

    ``params`` and ``grads`` are sequences of arrays; ``keys`` names each
    parameter in ``state`` (defaults to positions). Each parameter keeps its
    own step count so parameters added mid-training start with a fresh bias
    correction.
    """
    if keys is None:
        keys = list(range(len(params)))
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; aborting update")
    for key, p, g in zip(keys, params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {key}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
            state.steps[key] = 0
        v = state.v[key]
        t = state.steps[key] = state.steps[key] + 1
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
