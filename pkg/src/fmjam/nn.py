"""Network building blocks: linear layers, GRU cells, small MLPs.

Initialization scheme: orthogonal recurrent weights, uniform +-1/sqrt(fan_in)
input weights, zero biases.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor, concat, sigmoid, stack, tanh


def uniform_init(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def orthogonal_init(rng: Rng, n: int) -> np.ndarray:
    a = rng.normal((n, n))
    q, r = np.linalg.qr(a)
    # fix signs so the factorization (and hence the init) is unique
    return q * np.sign(np.diag(r))


class Module:
    """Anything holding parameters; supports named recursive collection."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[attr] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{attr}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{attr}.{i}.{sub}"] = p
        return out

    def load_parameters(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.parameters().items():
            key = prefix + name
            if key not in values:
                raise KeyError(f"checkpoint missing parameter '{key}'")
            if values[key].shape != p.shape:
                raise ValueError(
                    f"parameter '{key}' shape {values[key].shape} != {p.shape}")
            p.data = np.asarray(values[key], dtype=np.float64)


class Linear(Module):
    def __init__(self, rng: Rng, n_in: int, n_out: int):
        self.w = Tensor(uniform_init(rng, n_in, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class GruCell(Module):
    """Gated recurrent unit with update/reset/candidate gates.

    h' = (1 - u) * h + u * tanh(Wc x + Uc (r * h) + bc)
    """

    def __init__(self, rng: Rng, n_in: int, n_hidden: int):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.w_u = Tensor(uniform_init(rng, n_in, (n_in, n_hidden)), requires_grad=True)
        self.w_r = Tensor(uniform_init(rng, n_in, (n_in, n_hidden)), requires_grad=True)
        self.w_c = Tensor(uniform_init(rng, n_in, (n_in, n_hidden)), requires_grad=True)
        self.u_u = Tensor(orthogonal_init(rng, n_hidden), requires_grad=True)
        self.u_r = Tensor(orthogonal_init(rng, n_hidden), requires_grad=True)
        self.u_c = Tensor(orthogonal_init(rng, n_hidden), requires_grad=True)
        self.b_u = Tensor(np.zeros(n_hidden), requires_grad=True)
        self.b_r = Tensor(np.zeros(n_hidden), requires_grad=True)
        self.b_c = Tensor(np.zeros(n_hidden), requires_grad=True)

    def init_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.n_hidden)))

    def step(self, x_t: Tensor, h: Tensor) -> Tensor:
        """One recurrence step on batched rows (B, n_in) x (B, n_hidden)."""
        if x_t.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise ValueError(
                f"gru dims mismatch: x {x_t.shape}, h {h.shape}, "
                f"cell ({self.n_in}, {self.n_hidden})")
        xu = x_t @ self.w_u + self.b_u
        xr = x_t @ self.w_r + self.b_r
        xc = x_t @ self.w_c + self.b_c
        return self._step_from_projections(xu, xr, xc, h)

    def _step_from_projections(self, xu: Tensor, xr: Tensor, xc: Tensor,
                               h: Tensor) -> Tensor:
        u = sigmoid(xu + h @ self.u_u)
        r = sigmoid(xr + h @ self.u_r)
        c = tanh(xc + (r * h) @ self.u_c)
        return (1.0 - u) * h + u * c

    def run_sequence(self, xs: Tensor, h0: Tensor | None = None,
                     reverse: bool = False) -> Tensor:
        """All hidden states for xs of shape (B, T, n_in); returns (B, T, H).

        Input projections for the whole sequence are batched into single
        matmuls; only the recurrent part runs step by step.
        """
        b, t, _ = xs.shape
        xu = xs @ self.w_u + self.b_u
        xr = xs @ self.w_r + self.b_r
        xc = xs @ self.w_c + self.b_c
        h = h0 if h0 is not None else self.init_state(b)
        steps = range(t - 1, -1, -1) if reverse else range(t)
        hs: list[Tensor] = [None] * t  # type: ignore[list-item]
        for i in steps:
            h = self._step_from_projections(xu[:, i, :], xr[:, i, :], xc[:, i, :], h)
            hs[i] = h
        return stack(hs, axis=1)


def gru_step(cell: GruCell, x_t: Tensor, h: Tensor) -> Tensor:
    """Single-vector convenience wrapper around GruCell.step."""
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = x_t.reshape(1, -1)
        h = h.reshape(1, -1)
    out = cell.step(x_t, h)
    return out.reshape(-1) if squeeze else out


class Mlp(Module):
    """Fully-connected stack with ReLU between hidden layers, linear output."""

    def __init__(self, rng: Rng, n_in: int, hidden: list[int], n_out: int):
        dims = [n_in] + list(hidden) + [n_out]
        self.layers = [Linear(rng.split(f"fc{i}"), dims[i], dims[i + 1])
                       for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)
