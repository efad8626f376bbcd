"""Dense float64 tensors with reverse-mode automatic differentiation.

Small define-by-run engine on top of numpy. Every op records its parents
and a backward closure; `Graph.from_loss` topologically sorts the DAG and
`backward` replays it once in reverse. All data is float64 and any op that
produces a non-finite value raises immediately (overflow is an error, not
a silent NaN).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf from finite inputs (overflow, log of 0, ...)."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    return data


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    `_bwd` maps the output gradient to one gradient per parent (or None for
    parents that do not require grad).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str,
                bwd: Callable[[np.ndarray], tuple]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._bwd = bwd
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
            out._op = op
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- autodiff entry points ------------------------------------------------

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history, no grad requirement."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._bwd = None
        out._op = "sg"
        out.name = None
        return out

    def backward(self) -> None:
        Graph.from_loss(self).backward()

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
        return mul(self, -1.0)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def mT(self):
        return swap_last_axes(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_grad(x: Tensor) -> Tensor:
    return as_tensor(x).detach()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._result(data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._result(data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._result(data, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return Tensor._result(data, (a, b), "div", bwd)


def power(a, n) -> Tensor:
    a = as_tensor(a)
    n = float(n)
    data = a.data ** n

    def bwd(g):
        return (g * n * a.data ** (n - 1.0),)

    return Tensor._result(data, (a,), "pow", bwd)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (g * 2.0 * a.data,)

    return Tensor._result(a.data * a.data, (a,), "square", bwd)


# -- nonlinearities --------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return Tensor._result(data, (a,), "exp", bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return Tensor._result(data, (a,), "log", bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return Tensor._result(data, (a,), "tanh", bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = expit(a.data)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return Tensor._result(data, (a,), "sigmoid", bwd)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably via logaddexp."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bwd(g):
        return (g * expit(a.data),)

    return Tensor._result(data, (a,), "softplus", bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return Tensor._result(a.data * mask, (a,), "relu", bwd)


# -- reductions ------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(data), (a,), "sum", bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; max shift is a detached constant."""
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(shift))
    out = add(log(tsum(exp(shifted), axis=axis, keepdims=True)), Tensor(shift))
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


# -- shape ops -------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return Tensor._result(data, (a,), "reshape", bwd)


def swap_last_axes(a) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._result(data, (a,), "swapaxes", bwd)


def take(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]

    def bwd(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(data, (a,), "take", bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(pieces[i] if p.requires_grad else None
                     for i, p in enumerate(parts))

    return Tensor._result(data, parts, "concat", bwd)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        pieces = np.split(g, len(parts), axis=axis)
        return tuple(np.squeeze(pieces[i], axis=axis) if p.requires_grad else None
                     for i, p in enumerate(parts))

    return Tensor._result(data, parts, "stack", bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics on the last two axes.

    Both operands must be at least 2-D; leading axes broadcast.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(data, (a, b), "matmul", bwd)


# -- graph / backward ------------------------------------------------------------


class Graph:
    """Reverse-topologically ordered view of the DAG reaching a scalar loss."""

    def __init__(self, loss: Tensor, order: list[Tensor]):
        self.loss = loss
        self.order = order  # topological: parents before children
        self.grads: dict[int, np.ndarray] = {}

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        # Iterative DFS: graphs can be tens of thousands of nodes deep.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls(loss, order)

    def backward(self) -> dict[int, np.ndarray]:
        """Run all backward closures once; returns gradients keyed by id()."""
        grads = self.grads
        grads.clear()
        grads[id(self.loss)] = np.ones_like(self.loss.data)
        for node in reversed(self.order):
            g = grads.get(id(node))
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad = node.grad + g
            if node._bwd is None:
                continue
            parent_grads = node._bwd(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        return grads


def backward(loss: Tensor, params: Iterable[Tensor]) -> dict[int, np.ndarray]:
    """Gradient of a scalar loss for every tensor in `params`.

    Parameters not reachable from the loss (or reachable only through
    stop-gradient nodes) map to exact zeros.
    """
    params = list(params)
    for p in params:
        p.grad = None
    Graph.from_loss(loss).backward()
    out = {}
    for p in params:
        out[id(p)] = p.grad if p.grad is not None else np.zeros(p.shape)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / (|numeric| + 1e-12); a
    broken gradient therefore reports an O(1) error instead of being masked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x_var = Tensor(np.array(x.data, copy=True), requires_grad=True)
    loss = f(x_var)
    analytic = backward(loss, [x_var])[id(x_var)]

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(rel.max())


# -- random sampling hooks -------------------------------------------------------


class GaussianParams:
    """Mean and standard deviation of a diagonal Gaussian over latents."""

    __slots__ = ("mean", "std")

    def __init__(self, mean: Tensor, std: Tensor):
        self.mean = as_tensor(mean)
        self.std = as_tensor(std)
        if np.any(self.std.data <= 0.0):
            raise ValueError("std must be strictly positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape


def gaussian_reparam(params: GaussianParams, rng) -> Tensor:
    """Sample mean + std * eps with eps ~ N(0, I); grads flow to mean/std only."""
    eps = rng.normal(params.mean.shape)
    return add(params.mean, mul(params.std, Tensor(eps)))
