"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back into them. ``backward`` walks
the recorded graph in reverse creation order, which is a valid reverse
topological order because a node can only be created after its parents.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(ValueError):
    """An input violates a documented precondition (e.g. non-normalized rows)."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense n-d value with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "_pass_grad")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self._pass_grad: np.ndarray | None = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], None],
        name: str = "",
    ) -> "Tensor":
        """Create an op output. ``backward`` receives the output gradient."""
        out = cls(data, name=name)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self._pass_grad is None:
            self._pass_grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self._pass_grad = self._pass_grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


# ----------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor.from_op(data, (a, b), _backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def _backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(data, (a, b), _backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None

    def _backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor.from_op(data, (a, b), _backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def _backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor.from_op(a.data @ b.data, (a, b), _backward, "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: a._accumulate(g * mask), "relu")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data), "log")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor.from_op(data, (a,), _backward, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis)

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.shape))

    return Tensor.from_op(data, (a,), _backward, "mean")


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return Tensor.from_op(data, (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def softmax(z, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``z / temperature`` along the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_tensor(z)
    scaled = z.data / temperature
    e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        z._accumulate(p * (g - inner) / temperature)

    return Tensor.from_op(p, (z,), _backward, "softmax")


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``targets``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    targets = np.asarray(targets)
    batch, classes = logits.shape
    if targets.shape != (batch,):
        raise ShapeError(f"cross_entropy: {batch} logit rows but targets shape {targets.shape}")
    for row, t in enumerate(targets):
        if not 0 <= t < classes:
            raise IndexError(f"cross_entropy: target {t} at row {row} outside [0, {classes})")
    targets = targets.astype(np.int64)
    logp = log_softmax_array(logits.data)
    rows = np.arange(batch)
    value = -logp[rows, targets].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        logits._accumulate(g * grad / batch)

    return Tensor.from_op(np.array(value), (logits,), _backward, "cross_entropy")


def kl_div(p_teacher, p_student, atol: float = 1e-6) -> Tensor:
    """Batch-mean KL(p_teacher || p_student); the teacher side is never differentiated."""
    p_teacher = as_tensor(p_teacher).data
    p_student = as_tensor(p_student)
    if p_teacher.shape != p_student.shape:
        raise ShapeError(f"kl_div: teacher {p_teacher.shape} vs student {p_student.shape}")
    for label, rows in (("teacher", p_teacher), ("student", p_student.data)):
        bad = np.abs(rows.sum(axis=-1) - 1.0) > atol
        if np.any(bad) or np.any(rows < 0):
            raise ContractError(f"kl_div: {label} rows are not probability distributions")
    batch = p_teacher.shape[0] if p_teacher.ndim > 1 else 1
    support = p_teacher > 0
    log_t = np.log(np.where(support, p_teacher, 1.0))
    with np.errstate(divide="ignore"):
        log_s = np.log(p_student.data)
    terms = np.where(support, p_teacher * (log_t - log_s), 0.0)
    value = terms.sum() / batch

    def _backward(g):
        p_student._accumulate(np.where(support, -g * p_teacher / p_student.data, 0.0) / batch)

    return Tensor.from_op(np.array(value), (p_student,), _backward, "kl_div")


def mse(a, b) -> Tensor:
    """Mean squared difference; gradients flow into both sides."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def _backward(g):
        a._accumulate(2.0 * g * diff / diff.size)
        b._accumulate(-2.0 * g * diff / diff.size)

    return Tensor.from_op(np.array((diff * diff).mean()), (a, b), _backward, "mse")


# ----------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of a scalar ``loss``.

    Gradients accumulate across calls; use :func:`zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    order = [nodes[i] for i in sorted(nodes, reverse=True)]
    for node in order:
        node._pass_grad = None
    loss._pass_grad = np.ones(loss.shape)
    for node in order:
        if node._backward is not None and node._pass_grad is not None:
            node._backward(node._pass_grad)
    for node in order:
        g, node._pass_grad = node._pass_grad, None
        if g is None:
            g = np.zeros(node.shape)
        node.grad = g if node.grad is None else node.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
