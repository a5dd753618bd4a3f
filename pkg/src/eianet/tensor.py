"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the tape of its output. The
tape is the set of nodes reachable from a scalar loss; :func:`backward` visits
them in exact reverse creation order and then marks them consumed, so a graph
can be differentiated only once.

Example:
    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = (x * x).sum()
    >>> loss.backward()
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_creation_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that may take part in a differentiable computation.

    Attributes:
        data: the underlying ``float64`` ndarray (row-major).
        requires_grad: whether gradients should be accumulated into ``grad``.
        grad: ``None`` until a backward pass reaches this tensor.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._seq = next(_creation_counter)
        self._consumed = False
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_creation_counter)
    out._consumed = False
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- backward pass ------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every ``requires_grad`` tensor that produced ``loss``.

    Raises:
        ContractError: ``loss`` is not a scalar, or its tape was already consumed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("tape already consumed by an earlier backward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")

    tape = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise ContractError("graph contains a node from an already consumed tape")
        if node._backward is not None:
            tape.append(node)
            stack.extend(node._parents)
    tape.sort(key=lambda n: n._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in tape:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._consumed = True
        node._backward = None
        node._parents = ()


# -- elementwise arithmetic ---------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; gradient flows only where ``x > floor``."""
    mask = x.data > floor
    return _node(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clamp_min")


# -- reductions and shape ops ---------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _node(
        np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
        (x,),
        lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),),
        "sum",
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size / max(out.size, 1)
    return _node(
        out,
        (x,),
        lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,),
        "mean",
    )


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; the gradient scatters back with accumulation."""

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.array(x.data[index]), (x,), grad_fn, "take")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concatenate",
    )


# -- linear algebra ---------------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, batched over any leading axes.

    Raises:
        DimensionError: inner dimensions differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


def orthonormal_columns(rows: int, cols: int, seed: int) -> Tensor:
    """Return a seeded ``rows x cols`` matrix ``U`` with ``U.T @ U = I``.

    Thin QR of a standard-Gaussian matrix, with column signs fixed so the
    triangular factor has a non-negative diagonal.
    """
    if cols < 1 or rows < cols:
        raise DimensionError(f"need rows >= cols >= 1, got rows={rows}, cols={cols}")
    gauss = np.random.default_rng(seed).standard_normal((rows, cols))
    q, r = np.linalg.qr(gauss, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return Tensor(q * signs)


# -- neural-network primitives ------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), grad_fn, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each slice along ``axis`` to unit L2 norm.

    Slices with norm below ``eps`` map to zeros (and pass zero gradient).
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    ok = norm >= eps
    safe = np.where(ok, norm, 1.0)
    out = np.where(ok, x.data / safe, 0.0)

    def grad_fn(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(ok, (g - out * radial) / safe, 0.0),)

    return _node(out, (x,), grad_fn, "l2_normalize")


def _conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"non-integral conv output: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``w[F,C,kh,kw]``.

    Raises:
        DimensionError: channel mismatch or a non-integral output size.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = _conv_output_size(h, kh, stride, padding)
    wo = _conv_output_size(wd, kw, stride, padding)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        w2 = w.data.reshape(f, c)
        out = np.einsum("fc,bchw->bfhw", w2, xs, optimize=True)

        def grad_1x1(g):
            gw = np.einsum("bfhw,bchw->fc", g, xs, optimize=True).reshape(w.shape)
            gxs = np.einsum("fc,bfhw->bchw", w2, g, optimize=True)
            if stride == 1:
                return gxs, gw
            gx = np.zeros_like(x.data)
            gx[:, :, ::stride, ::stride] = gxs
            return gx, gw

        return _node(out, (x, w), grad_1x1, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: B x (C*kh*kw) x (ho*wo), so the product lands directly in NCHW order
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(f, c * kh * kw)
    out = (wmat @ cols).reshape(n, f, ho, wo)

    def grad_fn(g):
        g3 = g.reshape(n, f, ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        return gx, gw

    return _node(out, (x, w), grad_fn, "conv2d")


def global_average_pool(x: Tensor) -> Tensor:
    """``B x C x H x W -> B x C`` spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_average_pool expects 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return _node(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),),
        "global_average_pool",
    )


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` mean pooling; H and W must divide evenly."""
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise DimensionError(f"avg_pool2d({size}) cannot tile input of shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def grad_fn(g):
        spread = np.broadcast_to(g[:, :, :, None, :, None] / (size * size), (n, c, h // size, size, w // size, size))
        return (spread.reshape(n, c, h, w),)

    return _node(out, (x,), grad_fn, "avg_pool2d")

