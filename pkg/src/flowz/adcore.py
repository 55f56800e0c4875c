"""Reverse-mode automatic differentiation over dense float64 arrays.

Just enough autodiff to train masked-linear flow networks by gradient
descent: rank <= 2 values, matrix multiplies (optionally masked), a few
elementwise functions, and sum/mean reductions. Values are float64
throughout; evidence estimates are exponentially sensitive to the
surrogate density, so 32-bit drift is not acceptable.

Broadcasting is deliberately limited to the shapes the flow networks
produce: equal shapes, (batch, features) against (features,) row
vectors, and anything against a scalar.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

__all__ = [
    "Node",
    "ParamSet",
    "constant",
    "matmul",
    "masked_matmul",
    "exp",
    "log",
    "tanh",
    "softplus",
    "nsum",
    "nmean",
    "backward",
    "check_grad",
]


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim > 2:
        raise ShapeError(f"rank-{v.ndim} arrays are not supported (max rank 2)")
    return v


def _broadcastable(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    if a.ndim == 0 or b.ndim == 0:
        return True
    # (batch, features) against (features,) in either order
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return True
    return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the computation graph.

    Leaves are either trainable parameters or constants; interior nodes
    record their parents and a list of vector-Jacobian closures, one per
    parent, applied during the backward pass.
    """

    __slots__ = ("value", "op", "parents", "vjps", "grad", "trainable")

    def __init__(self, value, op="leaf", parents=(), vjps=(), trainable=False):
        self.value = _as_value(value)
        self.op = op
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.grad = None
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, trainable={self.trainable})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))


def constant(x) -> Node:
    return Node(x, op="const")


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _binary_shapes(a: Node, b: Node, op: str):
    if not _broadcastable(a.value, b.value):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    out = a.value + b.value
    return Node(
        out,
        op="add",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.shape),
            lambda g: _unbroadcast(g, b.shape),
        ),
    )


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    out = a.value * b.value
    return Node(
        out,
        op="mul",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def neg(a) -> Node:
    a = _wrap(a)
    return Node(-a.value, op="neg", parents=(a,), vjps=(lambda g: -g,))


def matmul(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.value @ b.value
    return Node(
        out,
        op="matmul",
        parents=(a, b),
        vjps=(
            lambda g: g @ b.value.T,
            lambda g: a.value.T @ g,
        ),
    )


def masked_matmul(x: Node, w: Node, mask: np.ndarray) -> Node:
    """x @ (w * mask) with a constant binary mask.

    The mask also gates the weight gradient, so masked-out entries stay
    exactly zero under training.
    """
    x, w = _wrap(x), _wrap(w)
    mask = np.asarray(mask, dtype=np.float64)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"masked_matmul: incompatible shapes {x.shape} and {w.shape}")
    if mask.shape != w.shape:
        raise ShapeError(f"masked_matmul: mask shape {mask.shape} != weight shape {w.shape}")
    wm = w.value * mask
    out = x.value @ wm
    return Node(
        out,
        op="masked_matmul",
        parents=(x, w),
        vjps=(
            lambda g: g @ wm.T,
            lambda g: (x.value.T @ g) * mask,
        ),
    )


def exp(a) -> Node:
    a = _wrap(a)
    out = np.exp(a.value)
    return Node(out, op="exp", parents=(a,), vjps=(lambda g: g * out,))


def log(a) -> Node:
    a = _wrap(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: argument has non-positive entries")
    return Node(np.log(a.value), op="log", parents=(a,), vjps=(lambda g: g / a.value,))


def tanh(a) -> Node:
    a = _wrap(a)
    out = np.tanh(a.value)
    return Node(out, op="tanh", parents=(a,), vjps=(lambda g: g * (1.0 - out * out),))


def softplus(a) -> Node:
    a = _wrap(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    sig = 1.0 / (1.0 + np.exp(-v))
    return Node(out, op="softplus", parents=(a,), vjps=(lambda g: g * sig,))


def nsum(a) -> Node:
    a = _wrap(a)
    return Node(
        a.value.sum(),
        op="sum",
        parents=(a,),
        vjps=(lambda g: np.broadcast_to(g, a.shape).copy(),),
    )


def nmean(a) -> Node:
    a = _wrap(a)
    n = a.value.size
    return Node(
        a.value.mean(),
        op="mean",
        parents=(a,),
        vjps=(lambda g: np.broadcast_to(g / n, a.shape).copy(),),
    )


def _topo_order(root: Node) -> list:
    """Parents-before-children order via iterative DFS (graphs can be deep)."""
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
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(loss: Node) -> dict:
    """Populate .grad on every node reachable from a scalar loss.

    Gradients accumulate across shared subexpressions. Returns a dict of
    gradients for the trainable leaves keyed by id; callers normally go
    through ParamSet.gradients() instead.
    """
    if not isinstance(loss, Node):
        raise TypeError("backward expects a Node")
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None:
            continue  # not on any path to the loss
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64)
            else:
                parent.grad = parent.grad + contrib
    return {id(n): n.grad for n in order if n.trainable}


class ParamSet:
    """Named collection of trainable leaf nodes."""

    def __init__(self):
        self._nodes: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._nodes:
            raise ConfigError(f"duplicate parameter name {name!r}")
        node = Node(value, op="param", trainable=True)
        self._nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self):
        return len(self._nodes)

    def names(self) -> list:
        return list(self._nodes)

    def arrays(self) -> dict:
        return {k: n.value for k, n in self._nodes.items()}

    def copy_arrays(self) -> dict:
        return {k: n.value.copy() for k, n in self._nodes.items()}

    def load_arrays(self, arrays: dict) -> None:
        for name, value in arrays.items():
            node = self._nodes[name]
            value = _as_value(value)
            if value.shape != node.value.shape:
                raise ShapeError(
                    f"param {name!r}: expected shape {node.value.shape}, got {value.shape}"
                )
            node.value = value.copy()

    def gradients(self) -> dict:
        """Gradients recorded by the last backward(); zeros where untouched."""
        out = {}
        for name, node in self._nodes.items():
            out[name] = np.zeros_like(node.value) if node.grad is None else node.grad
        return out

    def total_size(self) -> int:
        return sum(n.value.size for n in self._nodes.values())


def check_grad(loss_fn, params: ParamSet, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must build and return a scalar Node deterministically.
    Relative error per component is |analytic - fd| / (|analytic| + epsilon);
    returns 0.0 for an empty ParamSet.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    loss = loss_fn(params)
    if not np.isfinite(loss.value):
        raise DomainError("check_grad: loss is not finite")
    backward(loss)
    grads = params.gradients()

    worst = 0.0
    for name in params.names():
        node = params[name]
        analytic = grads[name]
        flat = node.value.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(params).value
            flat[i] = orig - epsilon
            down = loss_fn(params).value
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * epsilon)
        rel = np.abs(analytic.reshape(-1) - fd) / (np.abs(analytic.reshape(-1)) + epsilon)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
