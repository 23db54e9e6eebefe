"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a float32 or float64 ``numpy`` array.  Every
differentiable operation applied to tensors that require gradients records a
:class:`Node` on its output; :meth:`Tensor.backward` orders those nodes into a
:class:`Tape` and replays it once in reverse.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractViolation, InvalidArgumentError, NumericError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "stpnet_grad_enabled", default=True
)
_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def check_finite(arr: np.ndarray, op: str) -> None:
    """Raise :class:`NumericError` if ``arr`` holds NaN or Inf."""
    # One reduction is much cheaper than isfinite().all(); confirm before raising
    # because the sum itself can overflow.
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


class Node:
    """Record of one executed operation."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


# Marker left on tensors whose node has already been replayed.
_CONSUMED = Node("<consumed>", (), None)


class Tape:
    """Topologically ordered operations reachable from a root tensor.

    The tape is replayed exactly once; nodes are released as they are visited
    so a second backward through the same graph raises ``ContractViolation``.
    """

    def __init__(self, root: "Tensor"):
        self.root = root
        self.order = self._toposort(root)
        self._replayed = False

    @staticmethod
    def _toposort(root: "Tensor") -> list:
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is _CONSUMED:
                raise ContractViolation(
                    "backward called twice on the same graph; re-run the forward pass"
                )
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray) -> None:
        if self._replayed:
            raise ContractViolation("tape already replayed")
        self._replayed = True
        grads = {id(self.root): grad}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            node = t.node
            if node is None:
                if g is not None and t.requires_grad:
                    t._accumulate(g)
                continue
            t.node = _CONSUMED
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_TYPES:
        arr = arr.astype(np.float32)
    return arr


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def make_result(
    data: np.ndarray, parents: Tuple["Tensor", ...], backward: Callable, op: str
) -> "Tensor":
    """Wrap ``data`` as the output of ``op``, recording a node if needed."""
    check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.node = Node(op, parents, backward) if out.requires_grad else None
    return out


def as_tensor(x, dtype=None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        if self.data.dtype not in _FLOAT_TYPES:
            raise InvalidArgumentError(f"unsupported element type {self.data.dtype}")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = unbroadcast(g, self.data.shape)
        check_finite(g, "backward")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        if not self.requires_grad:
            raise ContractViolation("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgumentError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise InvalidArgumentError("grad shape does not match tensor shape")
        Tape(self).backward(grad)

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

        return make_result(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

        return make_result(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return make_result(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = (
                unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                if b.requires_grad
                else None
            )
            return ga, gb

        return make_result(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return make_result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise InvalidArgumentError("only scalar exponents are supported")
        p = float(exponent)
        x = self

        def backward(g):
            if p == 0.0:
                return (np.zeros_like(g),)
            return (g * p * np.power(x.data, p - 1.0),)

        return make_result(np.power(x.data, p), (x,), backward, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise InvalidArgumentError("matmul needs operands with ndim >= 2")

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        return make_result(a.data @ b.data, (a, b), backward, "matmul")

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        axes = _norm_axes(axis, x.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, x.shape),)

        return make_result(
            np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        n = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Maximum over ``axis``; gradient goes to the first maximal element."""
        x = self
        axes = _norm_axes(axis, x.ndim)
        keep = [a for a in range(x.ndim) if a not in axes]
        moved = np.transpose(x.data, keep + list(axes))
        lead = moved.shape[: len(keep)]
        flat = moved.reshape(lead + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, axes)

        def backward(g):
            g = np.asarray(g).reshape(lead)
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

        return make_result(out, (x,), backward, "max")

    # ---------------------------------------------------------------- shape
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return make_result(
            x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape"
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return make_result(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inv),),
            "transpose",
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        x = self

        def backward(g):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        return make_result(np.array(x.data[index]), (x,), backward, "getitem")

    # ---------------------------------------------------------- elementwise
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return make_result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self
        if np.any(x.data <= 0):
            raise NumericError("log of non-positive value")
        return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return make_result(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return make_result(
            self.data * mask, (self,), lambda g: (g * mask,), "relu"
        )

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)
        return make_result(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise InvalidArgumentError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))
