"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure which pushes the output gradient back to them.  :func:`backward` sorts
the graph topologically and replays those closures once each, accumulating
gradients additively on fan-out.

Array arithmetic is delegated to numpy; the differentiation rules are ours.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LOG_EPS = 1e-12
MASK_VALUE = -1e30

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
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

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum over the axes numpy broadcasting introduced or stretched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # tanh form never overflows and saturates cleanly to 0 and 1
    y = 0.5 + 0.5 * np.tanh(0.5 * x.data)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    shifted = x.data + eps

    def backward(g):
        x._accumulate(g / shifted)

    return _make(np.log(shifted), (x,), backward)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("tanh", x)`` or ``elementwise("add", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- linear algebra


EXACT_INNER_LIMIT = 16


def _matmul_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = a.shape[-1]
    if k > EXACT_INNER_LIMIT:
        return a @ b
    # short inner products: accumulate p = 0..k-1 left to right, which is
    # bit-identical to the textbook triple loop (BLAS reorders and fuses)
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for p in range(1, k):
        out = out + a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (leading dims of ``a`` are batch dims).

    ``b`` may be a 2-D weight shared across the batch, or carry the same
    leading dims as ``a``.  Inner extents up to ``EXACT_INNER_LIMIT`` are summed
    in naive loop order; longer ones go through BLAS.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: expected matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        out = _matmul_forward(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(y, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no tensors given")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=ax)):
            if p.requires_grad:
                p._accumulate(piece)

    return _make(out, parts, backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join equal-shaped tensors along a new axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("stack: no tensors given")
    if any(p.shape != parts[0].shape for p in parts):
        raise DimensionError(f"stack: shapes {[p.shape for p in parts]} differ")
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        for k, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(np.take(g, k, axis=ax))

    return _make(out, parts, backward)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis for p in parts)


def index(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    y = x.data[idx]
    basic = _is_basic(idx)

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if basic:
            x.grad[idx] += g
        else:
            np.add.at(x.grad, idx, g)

    return _make(np.array(y, dtype=np.float64), (x,), backward)


def take_columns(m: Tensor, cols) -> Tensor:
    """Columns ``cols`` of a 2-D matrix; an integer array gives shape [len(cols), rows]."""
    m = as_tensor(m)
    cols = np.asarray(cols)
    y = m.data[:, cols].T if cols.ndim else m.data[:, int(cols)]

    def backward(g):
        full = np.zeros_like(m.data)
        if cols.ndim:
            np.add.at(full.T, cols, g)
        else:
            full[:, int(cols)] += g
        m._accumulate(full)

    return _make(np.array(y), (m,), backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(y, (x,), backward)


# ---------------------------------------------------------------- probability


def softmax(v: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` is a boolean array (broadcastable to ``v``) marking valid slots;
    masked slots receive exactly zero probability.
    """
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise DimensionError(f"softmax: empty input of shape {v.shape}")
    d = v.data if mask is None else np.where(mask, v.data, MASK_VALUE)
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        v._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (v,), backward)


def nll_loss(p: Tensor, target) -> Tensor:
    """``-log(p[target] + eps)``; with leading batch dims, summed over all rows.

    ``p`` is [..., V] and ``target`` an integer array of shape ``p.shape[:-1]``.
    """
    p = as_tensor(p)
    n = p.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != p.shape[:-1]:
        raise DimensionError(f"nll_loss: targets {tgt.shape} do not match rows of {p.shape}")
    if np.any(tgt < 0) or np.any(tgt >= n):
        raise IndexError(f"nll_loss: target {target} out of range for {n} classes")
    rows = np.indices(tgt.shape)
    where = (*rows, tgt)
    picked = p.data[where]
    value = -np.log(picked + LOG_EPS).sum()

    def backward(g):
        full = np.zeros_like(p.data)
        full[where] = -g / (picked + LOG_EPS)
        p._accumulate(full)

    return _make(np.asarray(value), (p,), backward)


def squared_error(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"squared_error: shapes {u.shape} and {v.shape} differ")
    diff = u.data - v.data

    def backward(g):
        if u.requires_grad:
            u._accumulate(2.0 * g * diff)
        if v.requires_grad:
            v._accumulate(-2.0 * g * diff)

    return _make(np.asarray((diff * diff).sum()), (u, v), backward)


# ---------------------------------------------------------------- autodiff driver


def record(root: Tensor) -> list[Tensor]:
    """Topologically ordered graph nodes feeding ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = record(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # drop intermediate grads and graph links; leaves keep theirs
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


def sgd_update(params: Iterable[Tensor] | Mapping[str, Tensor], lr: float) -> None:
    """``p <- p - lr * grad`` for every parameter, then clear the grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    items = params.values() if isinstance(params, Mapping) else params
    for p in items:
        if p.grad is not None:
            if p.grad.shape != p.data.shape:
                raise DimensionError(f"sgd_update: grad {p.grad.shape} vs param {p.data.shape}")
            p.data -= lr * p.grad
        p.grad = None


class Adam:
    """Adam with bias correction; moment buffers are keyed like ``params``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is not None:
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            # parameters without a gradient this step still decay their moments
            else:
                self.m[k] = self.beta1 * self.m[k]
                self.v[k] = self.beta2 * self.v[k]
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params, self.lr, self.t = dict(params), lr, 0

    def step(self) -> None:
        self.t += 1
        sgd_update(self.params, self.lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays, t: int) -> None:
        self.t = t


def make_optimizer(name: str, params: Mapping[str, Tensor], lr: float):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
