"""Metric-tensor machinery: Jacobian estimators, G = J^T J, the flatness
regularizer, per-batch scale c^2, and latent mixup.

Two Jacobian estimators are provided. The per-dimension forward-difference
one perturbs each latent axis in turn; the random-vector one averages
smoothed directional differences (1/mu) E_u[(f(z + mu u) - f(z)) u^T] with
u ~ N(0, I) — the variance-reduced form with the f(z) subtraction. Small
latent spaces use the former, large ones the latter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor, stack

PER_DIM_FD = "per-dim-fd"
RANDOM_VECTOR = "random-vector"
EXACT = "exact"


@dataclass
class Jacobian:
    matrix: np.ndarray  # (n_out, n_z)
    estimator: str
    n_samples: int = 0
    scale: float = 0.0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("Jacobian has non-finite entries")


@dataclass
class MetricTensor:
    matrix: np.ndarray  # (n_z, n_z), symmetric PSD

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"metric tensor must be square, got {m.shape}")
        if np.abs(m - m.T).max() > 1e-9:
            raise ValueError("metric tensor not symmetric within 1e-9")
        if np.linalg.eigvalsh(m).min() < -1e-8:
            raise ValueError("metric tensor not positive semidefinite")
        self.matrix = m

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


@dataclass
class MixupConfig:
    alpha0: float = 0.1
    rng: Rng = field(default_factory=lambda: Rng(0, "mixup"))

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")


@dataclass
class JacobianConfig:
    sigma_fd: float = 1e-4
    mu_rand: float = 1e-3
    n_rand_samples: int | None = None  # default max(8, n_z // 4)
    jac_threshold: int = 16
    estimator: str | None = None  # override the n_z-based selection

    def samples_for(self, n_z: int) -> int:
        if self.n_rand_samples is not None:
            return self.n_rand_samples
        return max(8, n_z // 4)


def select_jacobian(n_z: int, config: JacobianConfig | None = None) -> str:
    """Estimator tag for a given latent dimensionality."""
    config = config or JacobianConfig()
    if n_z < 1:
        raise ValueError("n_z must be >= 1")
    if config.estimator is not None:
        return config.estimator
    return PER_DIM_FD if n_z <= config.jac_threshold else RANDOM_VECTOR


def jacobian_fd(f: Callable[[np.ndarray], np.ndarray], z: np.ndarray,
                sigma: float) -> Jacobian:
    """Forward differences along each latent axis: column t is
    [f(z + sigma e_t) - f(z)] / sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = np.asarray(z, dtype=np.float64)
    f0 = np.asarray(f(z), dtype=np.float64)
    cols = []
    for t in range(z.size):
        dz = z.copy()
        dz[t] += sigma
        cols.append((np.asarray(f(dz)) - f0) / sigma)
    return Jacobian(np.stack(cols, axis=-1), PER_DIM_FD, n_samples=z.size, scale=sigma)


def jacobian_rand(f: Callable[[np.ndarray], np.ndarray], z: np.ndarray,
                  mu: float, n_samples: int, rng: Rng) -> Jacobian:
    """Monte-Carlo smoothed Jacobian (1/mu) mean_s [(f(z + mu u_s) - f(z)) u_s^T]."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    f0 = np.asarray(f(z), dtype=np.float64)
    acc = np.zeros((f0.size, z.size))
    for _ in range(n_samples):
        u = rng.normal((z.size,))
        diff = (np.asarray(f(z + mu * u)) - f0) / mu
        acc += np.outer(diff, u)
    return Jacobian(acc / n_samples, RANDOM_VECTOR, n_samples=n_samples, scale=mu)


def jacobian_exact(f: Callable[[Tensor], Tensor], z: np.ndarray) -> Jacobian:
    """Autodiff-exact Jacobian, one backward pass per output dimension.

    Test oracle for the stochastic estimators; f must map a Tensor latent to
    a flat Tensor output.
    """
    z = np.asarray(z, dtype=np.float64)
    zt = Tensor(z, requires_grad=True)
    out = f(zt)
    rows = []
    for i in range(out.size):
        rows.append(T.backward(out[i], [zt])[id(zt)])
    return Jacobian(np.stack(rows, axis=0), EXACT)


def metric_tensor(j: Jacobian | np.ndarray) -> MetricTensor:
    """G = J^T J, symmetrized as (G + G^T) / 2."""
    m = j.matrix if isinstance(j, Jacobian) else np.asarray(j, dtype=np.float64)
    g = m.T @ m
    return MetricTensor((g + g.T) / 2.0)


def mixup(z_batch: np.ndarray, cfg: MixupConfig) -> np.ndarray:
    """Random affine interpolation of batch pairs, alpha ~ U(-a0, 1 + a0).

    Pairs are formed by shuffling the batch; one fresh alpha per pair.
    """
    z = np.asarray(z_batch, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2 latents")
    perm = cfg.rng.permutation(z.shape[0])
    alpha = cfg.rng.uniform(-cfg.alpha0, 1.0 + cfg.alpha0, (z.shape[0], 1))
    return (1.0 - alpha) * z + alpha * z[perm]


def mixup_pairs(z_batch: np.ndarray, cfg: MixupConfig):
    """Like mixup, but also returns the pair endpoints and alphas."""
    z = np.asarray(z_batch, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2 latents")
    perm = cfg.rng.permutation(z.shape[0])
    alpha = cfg.rng.uniform(-cfg.alpha0, 1.0 + cfg.alpha0, (z.shape[0], 1))
    mixed = (1.0 - alpha) * z + alpha * z[perm]
    return mixed, z, z[perm], alpha[:, 0]


def scale_c2(g_batch) -> float:
    """Per-batch scale: mean trace of G divided by n_z (treated as constant)."""
    mats = _as_matrix_batch(g_batch)
    if mats.shape[0] == 0:
        raise ValueError("scale_c2 needs a nonempty batch")
    n_z = mats.shape[-1]
    return float(np.trace(mats, axis1=-2, axis2=-1).mean() / n_z)


def fm_loss(g_batch, c2: float) -> float:
    """Mean squared Frobenius distance of each G to c^2 I."""
    if c2 <= 0:
        raise ValueError("c2 must be positive")
    mats = _as_matrix_batch(g_batch)
    eye = np.eye(mats.shape[-1])
    dev = mats - c2 * eye
    return float((dev * dev).sum(axis=(-2, -1)).mean())


def _as_matrix_batch(g_batch) -> np.ndarray:
    if isinstance(g_batch, np.ndarray) and g_batch.ndim == 3:
        return g_batch
    mats = [g.matrix if isinstance(g, MetricTensor) else np.asarray(g)
            for g in g_batch]
    return np.stack(mats, axis=0)


# -- differentiable training path ------------------------------------------------


def jacobian_fd_graph(decode_map: Callable[[Tensor], Tensor], z_points: np.ndarray,
                      sigma: float) -> Tensor:
    """Per-dimension forward-difference Jacobians as one autodiff graph.

    All perturbed points are evaluated in a single batched decode, so the
    graph stays small; returns a (B, n_out, n_z) tensor differentiable in
    the decoder parameters.
    """
    z = np.asarray(z_points, dtype=np.float64)
    b, n_z = z.shape
    stacked = [z] + [z + sigma * np.eye(n_z)[t] for t in range(n_z)]
    outs = decode_map(Tensor(np.concatenate(stacked, axis=0)))
    f0 = outs[:b]
    cols = [(outs[(t + 1) * b:(t + 2) * b] - f0) * (1.0 / sigma) for t in range(n_z)]
    return stack(cols, axis=-1)


def jacobian_rand_graph(decode_map: Callable[[Tensor], Tensor], z_points: np.ndarray,
                        mu: float, n_samples: int, rng: Rng) -> Tensor:
    """Random-vector Jacobian estimate as one autodiff graph, (B, n_out, n_z)."""
    z = np.asarray(z_points, dtype=np.float64)
    b, n_z = z.shape
    u = rng.normal((n_samples, b, n_z))
    stacked = np.concatenate([z] + [z + mu * u[s] for s in range(n_samples)], axis=0)
    outs = decode_map(Tensor(stacked))
    f0 = outs[:b]
    n_out = outs.shape[-1]
    acc = None
    for s in range(n_samples):
        diff = (outs[(s + 1) * b:(s + 2) * b] - f0) * (1.0 / mu)  # (B, n_out)
        term = diff.reshape(b, n_out, 1) * Tensor(u[s][:, None, :])
        acc = term if acc is None else acc + term
    return acc * (1.0 / n_samples)


def fm_penalty(decode_map: Callable[[Tensor], Tensor], z_points: np.ndarray,
               jac_cfg: JacobianConfig, rng: Rng) -> tuple[Tensor, float]:
    """Differentiable flatness penalty at (already detached) latent points.

    Returns (mean ||G - c^2 I||_F^2, c^2); c^2 is the batch trace scale and
    enters the loss as a constant, so gradients flow only through G's
    dependence on the decoder.
    """
    z = np.asarray(z_points, dtype=np.float64)
    n_z = z.shape[1]
    tag = select_jacobian(n_z, jac_cfg)
    if tag == PER_DIM_FD:
        jac = jacobian_fd_graph(decode_map, z, jac_cfg.sigma_fd)
    else:
        jac = jacobian_rand_graph(decode_map, z, jac_cfg.mu_rand,
                                  jac_cfg.samples_for(n_z), rng)
    g = jac.mT @ jac  # (B, n_z, n_z)
    g = (g + g.mT) * 0.5
    traces = np.trace(g.data, axis1=-2, axis2=-1)
    c2 = float(traces.mean() / n_z)
    dev = g - Tensor(c2 * np.eye(n_z))
    return T.tmean(T.tsum(dev * dev, axis=(-2, -1))), c2
