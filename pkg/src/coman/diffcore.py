"""Small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Node` whose id is larger than the ids of
its inputs, so sorting reachable nodes by id gives a valid reverse
topological order for :func:`backward`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Node:
    __slots__ = ("id", "op", "inputs", "_value", "grad", "_backward")
    __array_ufunc__ = None  # make ``ndarray * node`` defer to the node's reflected operator

    def __init__(self, value, op: str = "leaf", inputs: Sequence["Node"] = (), backward=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self._value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._backward = backward

    @property
    def value(self) -> np.ndarray:
        return self._value

    @value.setter
    def value(self, v) -> None:
        self._value = np.asarray(v, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # arithmetic sugar
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

    def __getitem__(self, idx):
        return slice_(self, idx)


class Parameter(Node):
    """A trainable leaf whose value persists across graph rebuilds."""

    __slots__ = ()

    def __init__(self, value):
        super().__init__(np.array(value, dtype=np.float64), op="param")


def constant(value) -> Node:
    return Node(value, op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# binary elementwise

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)
    return Node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)
    return Node(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, "div", (a, b), lambda g: (g / bv, -g * out / bv))


def where(cond, a, b) -> Node:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is not differentiated."""
    a, b = _as_node(a), _as_node(b)
    cond = np.asarray(cond, dtype=bool)
    shape = _broadcast_shape("where", a, b)
    try:
        shape = np.broadcast_shapes(shape, cond.shape)
    except ValueError:
        raise ShapeError("where", cond.shape, shape) from None
    return Node(
        np.where(cond, a.value, b.value),
        "where",
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


# ---------------------------------------------------------------------------
# unary elementwise

def neg(x) -> Node:
    x = _as_node(x)
    return Node(-x.value, "neg", (x,), lambda g: (-g,))


def abs_(x) -> Node:
    x = _as_node(x)
    sign = np.sign(x.value)
    return Node(np.abs(x.value), "abs", (x,), lambda g: (g * sign,))


def exp(x) -> Node:
    x = _as_node(x)
    out = np.exp(x.value)
    return Node(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Node:
    x = _as_node(x)
    xv = x.value
    return Node(np.log(xv), "log", (x,), lambda g: (g / xv,))


def square(x) -> Node:
    x = _as_node(x)
    xv = x.value
    return Node(xv * xv, "square", (x,), lambda g: (2.0 * g * xv,))


def sigmoid(x) -> Node:
    x = _as_node(x)
    out = expit(x.value)
    return Node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    return Node(np.maximum(x.value, 0.0), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.01) -> Node:
    x = _as_node(x)
    d = np.where(x.value > 0, 1.0, slope)
    return Node(x.value * d, "leaky_relu", (x,), lambda g: (g * d,))


def elu(x, alpha: float = 1.0) -> Node:
    x = _as_node(x)
    xv = x.value
    neg_part = alpha * np.expm1(np.minimum(xv, 0.0))
    out = np.where(xv > 0, xv, neg_part)
    d = np.where(xv > 0, 1.0, neg_part + alpha)
    return Node(out, "elu", (x,), lambda g: (g * d,))


def softplus(x) -> Node:
    x = _as_node(x)
    xv = x.value
    return Node(np.logaddexp(0.0, xv), "softplus", (x,), lambda g: (g * expit(xv),))


def softmax(x, axis: int = -1) -> Node:
    x = _as_node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Node(out, "softmax", (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Node:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    x = _as_node(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Node(x.value * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# structural

def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    av, bv = a.value, b.value

    def backward(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return Node(av @ bv, "matmul", (a, b), backward)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Node(out, "concat", nodes, backward)


def slice_(x, idx) -> Node:
    x = _as_node(x)
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return Node(x.value[idx], "slice", (x,), backward)


def take(table, indices) -> Node:
    """Gather rows of a 2-D ``table`` by integer ``indices`` (any shape)."""
    table = _as_node(table)
    indices = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Node(table.value[indices], "take", (table,), backward)


def reshape(x, shape) -> Node:
    x = _as_node(x)
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return Node(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axis1: int = -1, axis2: int = -2) -> Node:
    x = _as_node(x)
    return Node(
        np.swapaxes(x.value, axis1, axis2),
        "transpose",
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


def broadcast_to(x, shape) -> Node:
    x = _as_node(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", old, shape) from None
    return Node(out, "broadcast", (x,), lambda g: (_unbroadcast(g, old),))


def sum_(x, axis=None, keepdims: bool = False) -> Node:
    x = _as_node(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Node(x.value.sum(axis=axis, keepdims=keepdims), "sum", (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = _as_node(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# reverse pass

def _reachable(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node.inputs)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(loss: Node) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every node reachable from ``loss``.

    Returns a mapping from node id to its adjoint. Each reachable node is
    visited exactly once, in decreasing id order.
    """
    if loss.value.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    order = _reachable(loss)
    pending: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in order:
        # nodes that received no contribution have a zero adjoint
        g = pending.pop(node.id, None)
        node.grad = np.zeros(node.shape) if g is None else g
        if node._backward is None or g is None:
            continue
        contribs = node._backward(g)
        for inp, c in zip(node.inputs, contribs):
            if c is None:
                continue
            c = _unbroadcast(np.asarray(c, dtype=np.float64), inp.shape)
            prev = pending.get(inp.id)
            pending[inp.id] = c if prev is None else prev + c
    return {node.id: node.grad for node in order}


# ---------------------------------------------------------------------------
# modules and initialization

class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Parameter):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    """Unconstrained affine map ``x @ W.T + b`` with W of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.w = uniform_init(rng, (n_out, n_in), n_in)
        self.b = uniform_init(rng, (n_out,), n_in) if bias else None

    def __call__(self, x: Node) -> Node:
        if x.shape[-1] != self.n_in:
            raise ShapeError("linear", x.shape, self.w.shape)
        out = matmul(x, transpose(self.w))
        return out + self.b if self.b is not None else out


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdagradState:
    learning_rate: float
    epsilon: float = 1e-8
    accumulators: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def adagrad_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdagradState
) -> list[np.ndarray]:
    """One Adagrad update; accumulators are grown before the step is taken."""
    if len(params) != len(grads):
        raise ShapeError("adagrad_step", (len(params),), (len(grads),))
    if not state.accumulators:
        state.accumulators = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    updated = []
    for k, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        acc = state.accumulators[k]
        if p.shape != g.shape or acc.shape != p.shape:
            raise ShapeError("adagrad_step", p.shape, g.shape)
        acc = acc + g * g
        state.accumulators[k] = acc
        denom = np.sqrt(acc) + state.epsilon
        with np.errstate(invalid="ignore", divide="ignore"):
            step = np.where(acc > 0, g / denom, 0.0)
        updated.append(np.asarray(p - state.learning_rate * step))
    return updated


class Adagrad:
    """Stateful wrapper applying :func:`adagrad_step` to a parameter list in place."""

    def __init__(self, params: Iterable[Parameter], learning_rate: float, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdagradState(learning_rate, epsilon)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        new = adagrad_step([p.value for p in self.params], grads, self.state)
        for p, v in zip(self.params, new):
            p.value = v


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    n_checked: int
    max_rel_err: float
    max_abs_err: float
    failures: list[tuple[str, tuple, float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(
    loss_fn: Callable[[], Node],
    params: dict[str, Node],
    n_points: int = 50,
    seed: int = 0,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
) -> GradCheckReport:
    """Compare backprop gradients with central differences on sampled coordinates.

    ``loss_fn`` must rebuild the graph from the current parameter values on each
    call and be deterministic.
    """
    loss = loss_fn()
    backward(loss)
    # parameters off the loss path have no adjoint; their true gradient is zero
    analytic = {k: np.zeros(p.shape) if p.grad is None else p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[k].value.size for k in names], dtype=float)
    picks = rng.choice(len(names), size=n_points, p=sizes / sizes.sum())
    failures = []
    max_rel = max_abs = 0.0
    for k in picks:
        name = names[k]
        p = params[name]
        flat = int(rng.integers(p.value.size))
        idx = np.unravel_index(flat, p.shape)
        orig = p.value[idx]
        p.value[idx] = orig + step
        up = float(loss_fn().value)
        p.value[idx] = orig - step
        down = float(loss_fn().value)
        p.value[idx] = orig
        numeric = (up - down) / (2 * step)
        a = float(analytic[name][idx])
        err = abs(a - numeric)
        rel = err / max(abs(a), abs(numeric), 1e-300)
        max_abs = max(max_abs, err)
        if err > abs_tol:
            max_rel = max(max_rel, rel)
            if rel > rel_tol:
                failures.append((name, idx, a, numeric))
    return GradCheckReport(n_points, max_rel, max_abs, failures)
