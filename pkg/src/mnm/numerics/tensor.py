"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` holding a
reference to its parents and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order, visiting each node once.

Broadcasting is deliberately narrow: binary operations accept operands of
equal shape, or one operand that is a scalar (a Python number or a
zero-dimensional tensor). Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        described = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {described}")


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap the result of a custom operation.

        ``backward`` receives the gradient w.r.t. ``data`` and must return one
        gradient (or None) per parent, in order.
        """
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        buffers: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = buffers.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = buffers.get(key)
                buffers[key] = pg if prev is None else prev + pg

    # -- operators ------------------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``; zero where unreachable."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    loss.backward()
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, g in zip(params, saved):
        p.grad = g
    return out


# -- elementwise binary ---------------------------------------------------------


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return Tensor.from_op(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return Tensor.from_op(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)),
    )


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("maximum", a, b)
    pick_a = a.data >= b.data
    return Tensor.from_op(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(g * pick_a, a), _reduce_to(g * ~pick_a, b)),
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("minimum", a, b)
    pick_a = a.data <= b.data
    return Tensor.from_op(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(g * pick_a, a), _reduce_to(g * ~pick_a, b)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,))


# -- elementwise unary ----------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only; no overflow for any finite input
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    return Tensor.from_op(
        np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),)
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return Tensor.from_op(out, (x,), lambda g: (g * inside,))


def square(x: Tensor) -> Tensor:
    return Tensor.from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch by name; kept for callers that select the op at runtime."""
    table = {
        "sigmoid": sigmoid,
        "softplus": softplus,
        "relu": relu,
        "exp": exp,
        "log": log,
        "add": add,
        "sub": sub,
        "mul": mul,
        "scale": scale,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


# -- reductions -----------------------------------------------------------------


def _expand_grad(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    return Tensor.from_op(
        np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
        (x,),
        lambda g: (np.array(_expand_grad(g, shape, axis, keepdims)),),
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    return Tensor.from_op(
        np.asarray(x.data.mean(axis=axis, keepdims=keepdims)),
        (x,),
        lambda g: (_expand_grad(g, shape, axis, keepdims) / count,),
    )


def max_(x: Tensor, axis: int = -1) -> Tensor:
    """Maximum along one axis; gradient routed to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


# -- shape manipulation -----------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),)
    )


def getitem(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, slice)) for p in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return Tensor.from_op(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor.from_op(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly, or ``b`` must be 2-D, in which case
    it is shared across all leading axes of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g @ b.data.T, a2.T @ g2)

        return Tensor.from_op(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return Tensor.from_op(out, (a, b), backward)
