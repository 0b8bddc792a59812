"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients.  ``backward`` collects the nodes reachable
from a scalar loss and visits them in exact reverse creation order.  Leaf
tensors created with ``requires_grad=True`` own a zero-initialised ``grad``
buffer that accumulates across ``backward`` calls until ``zero_grad``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, DomainError, NumericError, UsageError

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor initialised with non-finite values")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_counter)
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out._id = next(_counter)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() on tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad and self._backward is None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def back(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), back, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return Tensor._result(out, (x,), back, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def back(g):
        return (g * mask,)

    return Tensor._result(out, (x,), back, "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def back(g):
        return (g * out,)

    return Tensor._result(out, (x,), back, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    out = np.log(x.data)

    def back(g):
        return (g / x.data,)

    return Tensor._result(out, (x,), back, "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch ``op`` by name; ``elementwise("add", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*[as_tensor(a) for a in args])


# -- linear algebra and shape ops ---------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), back, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), back, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def back(g):
        return (np.transpose(g, inv),)

    return Tensor._result(out, (x,), back, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.array(out)
    else:
        out = out.copy()

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (x,), back, "getitem")


def _is_basic_index(index) -> bool:
    # slices/ints never alias an element twice, so plain assignment is safe
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(out, tensors, back, "stack")


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(out, (x,), back, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


# -- convolution and pooling ---------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlate a ``C×H×W`` input with ``K×C×kh×kw`` kernels."""
    if stride <= 0:
        raise ConfigError(f"conv2d stride must be positive, got {stride}")
    if pad < 0:
        raise ConfigError(f"conv2d pad must be non-negative, got {pad}")
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    C, H, W = x.shape
    K, _, kh, kw = kernels.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    # cols: (C*kh*kw, Ho*Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * kh * kw, Ho * Wo)
    kmat = kernels.data.reshape(K, -1)
    out = (kmat @ cols).reshape(K, Ho, Wo)
    parents = [x, kernels]
    if bias is not None:
        out = out + bias.data.reshape(K, 1, 1)
        parents.append(bias)

    def back(g):
        g2 = g.reshape(K, Ho * Wo)
        dk = (g2 @ cols.T).reshape(kernels.shape)
        dcols = (kmat.T @ g2).reshape(C, kh, kw, Ho, Wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
        dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return Tensor._result(out, parents, back, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size×size`` max pooling; spatial dims must divide evenly."""
    C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"max_pool2d: {H}x{W} not divisible by {size}")
    Ho, Wo = H // size, W // size
    blocks = x.data.reshape(C, Ho, size, Wo, size).transpose(0, 1, 3, 2, 4).reshape(C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        return (d.reshape(C, Ho, Wo, size, size).transpose(0, 1, 3, 2, 4).reshape(C, H, W),)

    return Tensor._result(out, (x,), back, "max_pool2d")


# -- losses ------------------------------------------------------------------------

def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(logits))


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``weights`` (optional, one per row) turns the plain mean into a weighted
    mean ``sum(w * nll) / sum(w)``; rows with weight 0 are ignored, which is how
    padded caption steps are masked.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects n×V logits, got {logits.shape}")
    n, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    if np.any(targets < 0) or np.any(targets >= V):
        raise IndexError(f"target index out of range [0, {V})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise UsageError("softmax_cross_entropy needs at least one weighted row")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -(w * logp[rows, targets]).sum() / total

    def back(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return Tensor._result(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Smoothed L1 summed over coordinates and averaged over boxes (rows)."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: {pred.shape} vs {target.shape}")
    n_boxes = pred.shape[0] if pred.ndim >= 2 else 1
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5).sum() / max(n_boxes, 1)

    def back(g):
        return (np.where(small, d, np.sign(d)) * (g / max(n_boxes, 1)),)

    return Tensor._result(np.asarray(loss), (pred,), back, "smooth_l1")


# -- backward -------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate; call ``zero_grad`` (or ``sgd_step``) between
    independent passes.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack_.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = t.grad + g if t.grad is not None else g.copy()
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# -- optimisation ------------------------------------------------------------------------

@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.98
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def sgd_step(params: dict[str, Tensor], state: SgdState) -> None:
    """``v <- momentum*v - lr*grad``; ``w <- w + v``; then zero the grads."""
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v - state.learning_rate * p.grad
        state.velocity[name] = v
        p.data = p.data + v
        p.grad = np.zeros_like(p.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm
