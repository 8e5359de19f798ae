"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every operation records a vector-Jacobian product per parent; backprop walks
the graph in reverse topological order. Graphs are single-threaded and
rebuilt per evaluation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


# graphs are thread-confined; recording state must be too
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        self._prev = _recording()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A value node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_needs_grad", "_parents")

    def __init__(self, value, requires_grad=False, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._needs_grad = requires_grad or any(p._needs_grad for p, _ in self._parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars become constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(value) -> Tensor:
    return Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _node(value, parents) -> Tensor:
    if not _recording():
        return Tensor(value)
    parents = [(p, fn) for p, fn in parents if p._needs_grad]
    return Tensor(value, parents=parents)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _node(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _node(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _node(out, [(a, lambda g: _unbroadcast(g * b.value, a.shape)),
                       (b, lambda g: _unbroadcast(g * a.value, b.shape))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D x 2D, batched ND x ND (broadcastable batch dims),
    or ND x 2D (shared weight applied to the trailing axis)."""
    av, bv = a.value, b.value
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def da(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def db(g):
        if bv.ndim == 2 and av.ndim > 2:
            return np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)),
                                             tuple(range(g.ndim - 1))))
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _node(out, [(a, da), (b, db)])


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inv))])


def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape
    return _node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def take(a: Tensor, idx) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into a zero array."""
    out = a.value[idx]

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, g)
        return z

    return _node(out, [(a, vjp)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-np.clip(a.value, -500, 500)))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0.0)
    return _node(out, [(a, lambda g: g * (a.value > 0.0))])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.value), [(a, lambda g: g / a.value)])


def softmax(a: Tensor, axis=-1) -> Tensor:
    # max-subtraction for numerical stability
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node(out, [(a, vjp)])


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _node(out, [(a, vjp)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis, then elementwise affine."""
    d = x.value.shape[-1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match feature dim ({d},)")
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = xhat * gain.value + bias.value

    def dx(g):
        gh = g * gain.value
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def dgain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def dbias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _node(out, [(x, dx), (gain, dgain), (bias, dbias)])


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; ids is an integer array, gradient scatter-adds rows."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.value[ids]

    def vjp(g):
        z = np.zeros_like(table.value)
        np.add.at(z, ids, g)
        return z

    return _node(out, [(table, vjp)])


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Pre-sampled mask scaled by 1/(1-rate) at train time, identity at eval."""
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return _node(x.value * mask, [(x, lambda g: g * mask)])


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return _node(out, [(a, vjp)])


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def take_last(a: Tensor, ids) -> Tensor:
    """Pick one entry along the last axis per leading position (CE gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.value.shape[:-1]:
        raise ShapeError(f"take_last: ids shape {ids.shape} does not index {a.shape}")
    out = np.take_along_axis(a.value, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        z = np.zeros_like(a.value)
        np.put_along_axis(z, ids[..., None], g[..., None], axis=-1)
        return z

    return _node(out, [(a, vjp)])


def custom(value, parents) -> Tensor:
    """Node with a hand-supplied value and vjp list (for fused ops like CTC)."""
    return _node(value, parents)


# ----------------------------------------------------------------- backprop

def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p, _ in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # parents before children


def backpropagate(root: Tensor):
    """Accumulate gradients of a scalar root into every requires_grad leaf.

    Returns the list of (leaf, grad) pairs in deterministic graph order.
    Intermediate gradients are freed as soon as they have been propagated.
    """
    if root.value.size != 1:
        raise ValueError(f"backpropagate: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
            leaves.append((node, node.grad))
        for parent, vjp in node._parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    leaves.reverse()  # leaf-creation order (parents appear first in topo order)
    return leaves


def evaluate_graph(inputs: dict, program) -> Tensor:
    """Run a program (a composition of the primitives above) over named
    input arrays; returns the root node with gradient rules recorded."""
    return program({k: parameter(np.asarray(v, dtype=np.float64))
                    for k, v in inputs.items()})


@dataclass
class GradientCheckReport:
    """Max relative error per differentiable input, plus failing names."""
    max_rel_error: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_check(program, inputs: dict, epsilon: float = 1e-5,
                   tolerance: float = 1e-4) -> GradientCheckReport:
    """Compare backprop gradients of program(inputs) against central
    finite differences. `program` maps a dict of Tensors to a scalar Tensor.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("gradient_check: epsilon must be positive")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: parameter(v.copy()) for k, v in arrays.items()}
    root = program(leaves)
    backpropagate(root)

    def eval_at(vals):
        with no_grad():
            return float(program({k: tensor(v) for k, v in vals.items()}).value)

    report = GradientCheckReport()
    for name, base in arrays.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = {k: (v.copy() if k == name else v) for k, v in arrays.items()}
            vflat = vals[name].reshape(-1)
            vflat[i] = orig + epsilon
            hi = eval_at(vals)
            vflat[i] = orig - epsilon
            lo = eval_at(vals)
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * epsilon)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
        report.max_rel_error[name] = err
        if err > tolerance:
            report.failures.append(name)
    return report
