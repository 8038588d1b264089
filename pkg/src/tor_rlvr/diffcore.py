"""Minimal reverse-mode differentiation over float64 numpy arrays.

The op set is deliberately small: what the decoder policy and the surrogate
objectives need, nothing more. Broadcasting is limited to the "row-wise"
case, where the smaller operand matches the trailing dimensions of the
larger one (a bias added to every row, a causal mask added to every head).

Typical use::

    x = Tensor(np.array([3.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    x.grad  # array([6.])

or, for a named-input contract, wrap a function in a :class:`Graph`.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

__all__ = [
    "Tensor", "Graph", "evaluate", "backward", "finite_difference_check",
    "FDReport", "no_grad", "corrupt_adjoint",
    "add", "sub", "mul", "matmul", "exp", "log", "tanh", "softmax",
    "log_softmax", "rms_norm", "embed", "pick", "sum", "mean", "reshape", "transpose",
    "concat", "minimum", "clip",
]

_ids = itertools.count()


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tape = None
        self.adjoint_scale = 1.0


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording parents (sampling, scoring)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def corrupt_adjoint(scale=1.1):
    """Debug hook: scale every matmul adjoint. Gradient checks must fail under it."""
    prev = _state.adjoint_scale
    _state.adjoint_scale = scale
    try:
        yield
    finally:
        _state.adjoint_scale = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "node_id",
                 "_parents", "_backward")

    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def numpy(self):
        return self.values

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.values.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        grads = {self.node_id: np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward_fn, op):
    out = Tensor(values)
    out.op = op
    if not np.all(np.isfinite(out.values)):
        raise NumericError(f"non-finite value produced by {op} at node {out.node_id}")
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    if _state.tape is not None:
        _state.tape.append(out)
    return out


def _unbroadcast(g, shape):
    # reverse of the row-wise broadcast: sum over leading axes
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_rowwise(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or b.values.size == 1 or a.values.size == 1:
        return
    small, big = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if big[len(big) - len(small):] != small:
        raise ConfigurationError(f"{op}: shapes {sa} and {sb} are not row-wise compatible")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return _unbroadcast(g, shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_rowwise("add", a, b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_rowwise("sub", a, b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_rowwise("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)), "mul")


def matmul(a, b):
    """Batched matrix product; ``b`` may be 2-D and shared across the batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ConfigurationError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values

    def back(g):
        s = _state.adjoint_scale
        ga = g @ np.swapaxes(bv, -1, -2)
        if b.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga * s, gb * s

    return _make(av @ bv, (a, b), back, "matmul")


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = _as_tensor(x)
    xv = x.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return _make(out, (x,), lambda g: (g / xv,), "log")


def tanh(x):
    x = _as_tensor(x)
    out = np.tanh(x.values)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


def rms_norm(x, eps=1e-6):
    """Scale each last-axis vector to unit root-mean-square."""
    x = _as_tensor(x)
    r = np.sqrt((x.values * x.values).mean(axis=-1, keepdims=True) + eps)
    y = x.values / r

    def back(g):
        return ((g - y * (g * y).mean(axis=-1, keepdims=True)) / r,)

    return _make(y, (x,), back, "rms_norm")


def embed(table, ids):
    """Row lookup: ``table[ids]`` for an integer array ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ConfigurationError(f"embed: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigurationError(f"embed: ids outside [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.values[ids], (table,), back, "embed")


def pick(x, idx):
    """Gather along the last axis: ``out[..., ] = x[..., idx[...]]``."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ConfigurationError(f"pick: index shape {idx.shape} does not match {x.shape}")
    out = np.take_along_axis(x.values, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), back, "pick")


def sum(x, axis=None):  # noqa: A001
    x = _as_tensor(x)
    out = x.values.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), back, "sum")


def mean(x, axis=None):
    x = _as_tensor(x)
    n = x.values.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise ConfigurationError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = _as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.values, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigurationError(
            f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _index(x, index):
    out = x.values[index]

    def back(g):
        gx = np.zeros_like(x.values)
        gx[index] += g
        return (gx,)

    return _make(np.array(out, copy=True), (x,), back, "index")


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"minimum: shapes {a.shape} and {b.shape} differ")
    take_a = a.values <= b.values
    return _make(np.where(take_a, a.values, b.values), (a, b),
                 lambda g: (g * take_a, g * ~take_a), "minimum")


def clip(x, lo, hi):
    x = _as_tensor(x)
    inside = (x.values > lo) & (x.values < hi)
    return _make(np.clip(x.values, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# named-input graphs


@dataclass
class Graph:
    """A traced computation ``fn(**inputs) -> Tensor`` over named arrays.

    ``evaluate`` records every op in creation order (a valid topological
    order); ``backward`` then fills gradients for all named inputs, zero for
    inputs the output does not depend on.
    """

    fn: object
    nodes: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    output: Tensor = None

    @property
    def output_id(self):
        return None if self.output is None else self.output.node_id

    def evaluate(self, **inputs):
        self.inputs = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                       for k, v in inputs.items()}
        self.nodes = []
        prev = _state.tape
        _state.tape = self.nodes
        try:
            out = self.fn(**self.inputs)
        finally:
            _state.tape = prev
        self.output = _as_tensor(out)
        return self.output

    def backward(self):
        if self.output is None:
            raise UsageError("evaluate must run before backward")
        if self.output.values.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {self.output.shape}")
        for t in self.inputs.values():
            t.grad = None
        if self.output.requires_grad:
            self.output.backward()
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
                for k, t in self.inputs.items()}


def evaluate(graph, inputs):
    return graph.evaluate(**inputs)


def backward(graph):
    return graph.backward()


@dataclass
class FDReport:
    max_error: float
    errors: dict
    worst: tuple
    tolerance: float

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def finite_difference_check(fn, inputs, h=1e-5, tolerance=1e-4):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    Per coordinate the error is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``; the
    report passes iff the maximum over all coordinates is within tolerance.
    """
    if not 0.0 < h <= 1e-3:
        raise UsageError(f"finite-difference step must lie in (0, 1e-3], got {h}")
    graph = Graph(fn)
    graph.evaluate(**inputs)
    analytic = graph.backward()

    def f(values):
        with no_grad():
            return _as_tensor(fn(**{k: Tensor(v) for k, v in values.items()})).item()

    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    errors, worst, max_err = {}, (None, None), 0.0
    for name, arr in base.items():
        err = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(base)
            flat[j] = orig - h
            fm = f(base)
            flat[j] = orig
            gn = (fp - fm) / (2 * h)
            ga = analytic[name].reshape(-1)[j]
            e = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
            err.reshape(-1)[j] = e
            if e > max_err:
                max_err, worst = e, (name, np.unravel_index(j, arr.shape))
        errors[name] = err
    return FDReport(max_err, errors, worst, tolerance)
