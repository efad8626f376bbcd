"""Training objective: reconstruction terms, the hierarchical-prior
importance-weighted KL bound, the Lagrangian constrained loss, multiplier
updates, and the training loop itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import tensor as T
from .flatness import JacobianConfig, MixupConfig, fm_penalty, mixup
from .nn import Mlp, Module
from .rng import Rng
from .seqmodel import SequenceVae
from .sequences import SequenceBatch, N_DRUMS
from .tensor import (
    GaussianParams,
    NonFiniteError,
    Tensor,
    backward,
    gaussian_reparam,
    logsumexp,
    softplus,
)

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-6
LAMBDA_MAX = 1e12


def gaussian_logpdf(x: Tensor, params: GaussianParams) -> Tensor:
    """Log density of a diagonal Gaussian, summed over the last axis."""
    z = (x - params.mean) / params.std
    return T.tsum(z * z + 2.0 * T.log(params.std) + LOG_2PI, axis=-1) * (-0.5)


def standard_normal_logpdf(x: Tensor) -> Tensor:
    return T.tsum(x * x + LOG_2PI, axis=-1) * (-0.5)


def _split_gaussian(raw: Tensor, dim: int) -> GaussianParams:
    mean = raw[..., :dim]
    std = softplus(raw[..., dim:]) + STD_FLOOR
    return GaussianParams(mean, std)


class HierarchicalPrior(Module):
    """Learned prior p(z) = integral p(z|zeta) p(zeta) dzeta with auxiliary
    posterior q(zeta|z); both conditionals are diagonal Gaussians from MLPs."""

    def __init__(self, rng: Rng, n_z: int, zeta_dim: int, hidden: int):
        self.n_z = n_z
        self.zeta_dim = zeta_dim
        self.p_net = Mlp(rng.split("prior_p"), zeta_dim, [hidden, hidden], 2 * n_z)
        self.q_net = Mlp(rng.split("prior_q"), n_z, [hidden, hidden], 2 * zeta_dim)

    def p_params(self, zeta: Tensor) -> GaussianParams:
        return _split_gaussian(self.p_net(zeta), self.n_z)

    def q_params(self, z: Tensor) -> GaussianParams:
        return _split_gaussian(self.q_net(z), self.zeta_dim)

    @classmethod
    def degenerate(cls, n_z: int, zeta_dim: int = 2) -> "HierarchicalPrior":
        """p(z|zeta) = N(0, I) ignoring zeta and q(zeta|z) = N(0, I) = p(zeta).

        With these conditionals every importance weight is p(zeta)/q(zeta) = 1
        times N(z; 0, I), so the bound collapses to the plain Gaussian KL.
        """
        prior = cls(Rng(0, "degenerate"), n_z, zeta_dim, hidden=1)
        raw_std_one = math.log(math.expm1(1.0 - STD_FLOOR))
        for net, out_dim in ((prior.p_net, n_z), (prior.q_net, zeta_dim)):
            for layer in net.layers:
                layer.w.data = np.zeros_like(layer.w.data)
                layer.b.data = np.zeros_like(layer.b.data)
            head = net.layers[-1]
            head.b.data[out_dim:] = raw_std_one
        return prior


class StandardNormalPrior:
    """Fixed N(0, I) prior (the ablation switch); carries no parameters."""

    def parameters(self) -> dict[str, Tensor]:
        return {}


def kl_iw_bound(z: Tensor, q_params: GaussianParams,
                prior: HierarchicalPrior | StandardNormalPrior,
                k: int, rng: Rng) -> Tensor:
    """Importance-weighted upper bound on E[KL(q(z|x) || p(z))].

    F = E[log q(z|x)] - E_{zeta_1..K ~ q(zeta|z)}[log (1/K) sum_i
        p(z|zeta_i) p(zeta_i) / q(zeta_i|z)], log-sum-exp stabilized.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    log_q = gaussian_logpdf(z, q_params)  # (B,)
    if isinstance(prior, StandardNormalPrior):
        return T.tmean(log_q - standard_normal_logpdf(z))

    b = z.shape[0]
    zeta_q = prior.q_params(z)  # over (B, zeta_dim)
    eps = Tensor(rng.normal((k, b, prior.zeta_dim)))
    zeta = zeta_q.mean + zeta_q.std * eps  # (K, B, zeta_dim)

    p_given = prior.p_params(zeta.reshape(k * b, prior.zeta_dim))
    z_rep = Tensor(np.broadcast_to(z.data, (k,) + z.shape).reshape(k * b, -1))
    log_p_z = gaussian_logpdf(z_rep, p_given).reshape(k, b)
    log_p_zeta = standard_normal_logpdf(zeta)  # (K, B)
    log_q_zeta = gaussian_logpdf(zeta, GaussianParams(
        zeta_q.mean.reshape(1, b, -1) + Tensor(np.zeros((k, 1, 1))),
        zeta_q.std.reshape(1, b, -1) + Tensor(np.zeros((k, 1, 1))),
    ))
    log_w = log_p_z + log_p_zeta - log_q_zeta  # (K, B)
    log_mean = logsumexp(log_w.mT if False else T.swap_last_axes(log_w.reshape(k, b)), axis=-1)
    # logsumexp over K: arrange (B, K)
    log_mean = log_mean - math.log(k)
    return T.tmean(log_q - log_mean)


def recon_terms(x: SequenceBatch, decoded: Tensor) -> tuple[Tensor, dict[str, float]]:
    """Reconstruction term C and its per-part breakdown.

    Drums: mean per-beat Bernoulli cross-entropy on hits plus velocity and
    offset squared error averaged over beats where the target hit is 1.
    Categorical: mean per-frame cross-entropy. Motion: mean squared error.
    """
    if decoded.shape != x.frames.shape:
        raise ValueError(f"decoded shape {decoded.shape} != target {x.frames.shape}")
    if x.kind == "drum":
        hits = x.frames[:, :, :N_DRUMS]
        logits = decoded[:, :, :N_DRUMS]
        bce = T.tmean(softplus(logits) - logits * Tensor(hits))
        n_hits = max(hits.sum(), 1.0)
        mask = Tensor(hits)
        vel_err = (decoded[:, :, N_DRUMS:2 * N_DRUMS] - Tensor(
            x.frames[:, :, N_DRUMS:2 * N_DRUMS])) * mask
        off_err = (decoded[:, :, 2 * N_DRUMS:] - Tensor(
            x.frames[:, :, 2 * N_DRUMS:])) * mask
        vel_mse = T.tsum(vel_err * vel_err) * (1.0 / n_hits)
        off_mse = T.tsum(off_err * off_err) * (1.0 / n_hits)
        total = bce + vel_mse + off_mse
        parts = {"hit_bce": bce.item(), "vel_mse": vel_mse.item(),
                 "off_mse": off_mse.item()}
        return total, parts
    if x.kind == "categorical":
        log_probs = decoded - logsumexp(decoded, axis=-1, keepdims=True)
        ce = -T.tsum(log_probs * Tensor(x.frames)) * (
            1.0 / (x.frames.shape[0] * x.frames.shape[1]))
        return ce, {"frame_ce": ce.item()}
    err = decoded - Tensor(x.frames)
    mse = T.tmean(err * err)
    return mse, {"mse": mse.item()}


def lagrangian(f_term, c_term, lam: float, kappa2: float):
    """F + lambda (C - kappa^2); the flatness penalty is added by the caller."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return f_term + lam * (c_term - kappa2)


def lambda_update(lam: float, c_batch: float, kappa2: float, nu: float) -> float:
    """Multiplicative ascent on the multiplier, clamped to stay finite.

    lambda' = max(0, lambda * exp(nu * (C - kappa^2))).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if nu <= 0:
        raise ValueError("nu must be positive")
    exponent = min(max(nu * (c_batch - kappa2), -50.0), 50.0)
    return float(min(max(0.0, lam * math.exp(exponent)), LAMBDA_MAX))


class Adam:
    """Adaptive-moment gradient descent with per-step exponential lr decay."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, decay: float = 0.999):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        return self.lr * self.decay ** self.t

    def step(self, params: dict[str, Tensor], grads: dict[int, np.ndarray]) -> None:
        lr_t = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[id(p)]
            m = self.m.get(name)
            if m is None:
                m = np.zeros(p.shape)
                self.m[name] = m
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}


@dataclass
class TrainConfig:
    kappa: float = 0.14
    nu: float = 1.0
    k_iw: int = 8
    eta: float = 6000.0
    alpha0: float = 0.1
    lr: float = 5e-4
    lr_decay: float = 0.999
    batch_size: int = 32
    steps: int = 2000
    warmup_steps: int = 100
    prior: str = "vhp"  # or "standard" for the ablation
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.k_iw < 1:
            raise ValueError("K must be >= 1")

    @property
    def kappa2(self) -> float:
        return self.kappa ** 2


@dataclass
class LossReport:
    step: int
    recon: float
    kl_bound: float
    fm: float
    total: float
    lam: float
    c2: float
    lr: float
    parts: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class TrainState:
    """Everything a training run mutates: parameters, multiplier, optimizer
    moments, step counter and the named random streams."""

    def __init__(self, model: SequenceVae,
                 prior: HierarchicalPrior | StandardNormalPrior,
                 cfg: TrainConfig, seed: int):
        self.model = model
        self.prior = prior
        self.cfg = cfg
        self.lam = 1.0
        self.step = 0
        self.optimizer = Adam(lr=cfg.lr, decay=cfg.lr_decay)
        root = Rng(seed, "train")
        self.rng_reparam = root.split("reparam")
        self.rng_prior = root.split("prior")
        self.rng_mixup = root.split("mixup")
        self.rng_jac = root.split("jacobian")
        self.rng_data = root.split("data")

    def parameters(self) -> dict[str, Tensor]:
        out = {f"model.{k}": v for k, v in self.model.parameters().items()}
        out.update({f"prior.{k}": v for k, v in self.prior.parameters().items()})
        return out

    def _rng_snapshot(self) -> dict:
        return {name: getattr(self, name).state()
                for name in ("rng_reparam", "rng_prior", "rng_mixup", "rng_jac")}

    def _rng_restore(self, snapshot: dict) -> None:
        for name, st in snapshot.items():
            setattr(self, name, Rng.from_state(st))


def train_step(state: TrainState, batch: SequenceBatch) -> LossReport:
    """One constrained-objective gradient step; transactional on failure.

    A non-finite loss or gradient raises NonFiniteError and leaves every
    piece of the state (parameters, moments, multiplier, rng streams)
    exactly as it was.
    """
    cfg = state.cfg
    snapshot = state._rng_snapshot()
    try:
        q = state.model.posterior(batch)
        z = gaussian_reparam(q, state.rng_reparam)
        decoded = state.model.decoder.decode(z, teacher=batch)
        c_term, parts = recon_terms(batch, decoded)
        f_term = kl_iw_bound(z, q, state.prior, cfg.k_iw, state.rng_prior)
        total = lagrangian(f_term, c_term, state.lam, cfg.kappa2)
        fm_value, c2 = 0.0, 0.0
        if cfg.eta > 0:
            z_mix = mixup(z.data, MixupConfig(cfg.alpha0, state.rng_mixup))
            fm_t, c2 = fm_penalty(state.model.decoder.decode_map, z_mix,
                                  cfg.jacobian, state.rng_jac)
            total = total + cfg.eta * fm_t
            fm_value = fm_t.item()
        params = state.parameters()
        grads = backward(total, params.values())
        for name, p in params.items():
            if not np.all(np.isfinite(grads[id(p)])):
                raise NonFiniteError(f"non-finite gradient for {name}")
    except NonFiniteError:
        state._rng_restore(snapshot)
        raise

    report = LossReport(
        step=state.step, recon=c_term.item(), kl_bound=f_term.item(),
        fm=fm_value, total=total.item(), lam=state.lam, c2=c2,
        lr=state.optimizer.current_lr(), parts=parts,
    )
    state.optimizer.step(params, grads)
    if state.step >= cfg.warmup_steps:
        state.lam = lambda_update(state.lam, c_term.item(), cfg.kappa2, cfg.nu)
    state.step += 1
    return report


def train(state: TrainState, data: SequenceBatch,
          log_fn: Callable[[LossReport], None] | None = None,
          stop_fn: Callable[[LossReport], bool] | None = None) -> list[LossReport]:
    """Run cfg.steps train steps over shuffled minibatches of `data`."""
    cfg = state.cfg
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    order = state.rng_data.permutation(n)
    cursor = 0
    reports = []
    for _ in range(cfg.steps - state.step):
        if cursor + cfg.batch_size > n:
            order = state.rng_data.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        report = train_step(state, data.subset(idx))
        reports.append(report)
        if log_fn is not None:
            log_fn(report)
        if stop_fn is not None and stop_fn(report):
            break
    return reports
