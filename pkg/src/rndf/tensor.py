"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar sorts the reachable graph topologically (the
:class:`Tape`), sweeps it in reverse, and writes ``.grad`` on every leaf tensor
that requires gradients.  The graph is rebuilt on every forward pass.
"""
import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# lower/upper clamp distance for routing probabilities
SIGMOID_EPS = 1e-6

_ids = itertools.count()
_debug = False

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_debug(enabled: bool) -> None:
    """Toggle finite-value checking after every forward operation."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_id = next(_ids)
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self, clamp: bool = True):
        return sigmoid(self, clamp=clamp)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> "Tape":
        return backward(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", back)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", back)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", back)


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: ArrayLike, clamp: bool = True, eps: float = SIGMOID_EPS) -> Tensor:
    """Logistic function, optionally clamped to ``[eps, 1 - eps]``.

    The backward pass always uses the derivative of the unclamped sigmoid;
    the clamp only guards the forward value against division by zero
    downstream.
    """
    a = as_tensor(a)
    s = _sigmoid(a.data)
    deriv = s * (1.0 - s)
    out = np.clip(s, eps, 1.0 - eps) if clamp else s
    return _make(out, (a,), "sigmoid", lambda g: (g * deriv,))


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", back)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def _normalize_axis(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a: ArrayLike, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)

    def back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes)), (a,), "sum", back)


def reduce_mean(a: ArrayLike, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axes)), (a,), "mean", back)


def elementwise(op: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid, scale."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid, "scale": scale}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands, **kwargs)


def reduce(op: str, t: ArrayLike, axis=None) -> Tensor:
    if op == "sum":
        return reduce_sum(t, axis)
    if op == "mean":
        return reduce_mean(t, axis)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered record of one backward sweep."""
    nodes: List[Tensor] = field(default_factory=list)
    gradients: Dict[int, np.ndarray] = field(default_factory=dict)

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        return self.gradients.get(t.tape_id)


def _topological(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.tape_id in seen:
            continue
        seen.add(node.tape_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.tape_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Tape:
    """Reverse sweep from a scalar ``loss``.

    Gradients of every reachable tensor are collected in the returned tape;
    leaf tensors with ``requires_grad`` additionally get ``.grad`` overwritten.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(nodes=_topological(loss))
    grads = tape.gradients
    grads[loss.tape_id] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.get(node.tape_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.tape_id in grads:
                grads[parent.tape_id] = grads[parent.tape_id] + pg
            else:
                grads[parent.tape_id] = pg
    for node in tape.nodes:
        if not node._parents and node.requires_grad:
            node.grad = grads.get(node.tape_id, np.zeros_like(node.data))
    return tape


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_gradient(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a Tensor (or ndarray when ``x`` is an ndarray) and returns a
    scalar Tensor or float.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    wrap = isinstance(x, Tensor)
    base = np.array(x.data if wrap else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def call(arr):
        val = f(Tensor(arr) if wrap else arr)
        return val.item() if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = call(base)
        flat[i] = orig - h
        fm = call(base)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(base.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
