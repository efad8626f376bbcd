"""Recurrent encoder/decoder: stacked bidirectional GRU encoder producing
posterior parameters, and a hierarchical conductor decoder emitting one bar
per conductor step.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .nn import GruCell, Linear, Module
from .rng import Rng
from .sequences import SequenceBatch, frame_dim, readout
from .tensor import GaussianParams, Tensor, concat, sigmoid, softplus, stack, tanh

STD_FLOOR = 1e-6


@dataclass
class ModelConfig:
    kind: str = "drum"
    n_z: int = 8
    n_s: int = 32
    bars: int = 2
    enc_hidden: int = 32
    enc_layers: int = 2
    enc_fc: int = 32
    cond_hidden: int = 32
    low_hidden: int = 32
    embed_dim: int = 16
    zeta_dim: int = 4
    prior_hidden: int = 32

    def __post_init__(self):
        if self.n_s % self.bars != 0:
            raise ValueError(f"n_s={self.n_s} not divisible by bars={self.bars}")

    @property
    def n_d(self) -> int:
        return frame_dim(self.kind)

    @property
    def steps_per_bar(self) -> int:
        return self.n_s // self.bars

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key == "kind":
                kwargs[key] = value
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


class EncoderNet(Module):
    """Stacked bidirectional GRUs + fully-connected head -> posterior params."""

    def __init__(self, rng: Rng, cfg: ModelConfig):
        self.cfg = cfg
        h = cfg.enc_hidden
        self.fwd = []
        self.bwd = []
        n_in = cfg.n_d
        for i in range(cfg.enc_layers):
            self.fwd.append(GruCell(rng.split(f"enc_fwd{i}"), n_in, h))
            self.bwd.append(GruCell(rng.split(f"enc_bwd{i}"), n_in, h))
            n_in = 2 * h
        self.fc = Linear(rng.split("enc_fc"), 2 * h, cfg.enc_fc)
        self.mean_head = Linear(rng.split("enc_mean"), cfg.enc_fc, cfg.n_z)
        self.rawstd_head = Linear(rng.split("enc_rawstd"), cfg.enc_fc, cfg.n_z)

    def __call__(self, x: Tensor) -> GaussianParams:
        """x: (B, n_s, n_d) -> diagonal Gaussian over (B, n_z)."""
        hs = x
        for fwd, bwd in zip(self.fwd, self.bwd):
            f = fwd.run_sequence(hs)
            b = bwd.run_sequence(hs, reverse=True)
            hs = concat([f, b], axis=-1)
        # final state of the forward pass, "final" (first-step) state backward
        last_f = hs[:, -1, : self.cfg.enc_hidden]
        last_b = hs[:, 0, self.cfg.enc_hidden:]
        feat = tanh(self.fc(concat([last_f, last_b], axis=-1)))
        mean = self.mean_head(feat)
        std = softplus(self.rawstd_head(feat)) + STD_FLOOR
        return GaussianParams(mean, std)


def encode(net: EncoderNet, x: SequenceBatch | np.ndarray) -> GaussianParams:
    frames = x.frames if isinstance(x, SequenceBatch) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise ValueError("encode: non-finite input")
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[1] != net.cfg.n_s:
        raise ValueError(f"encode: expected n_s={net.cfg.n_s}, got {frames.shape[1]}")
    return net(Tensor(frames))


class DecoderNet(Module):
    """Conductor GRU (one step per bar) driving a per-bar low-level GRU.

    The conductor sees only the latent code: its initial state comes from z
    through a tanh layer and z is its per-step input. Each bar re-initializes
    the low-level state from the conductor state; low-level inputs are the
    conductor embedding concatenated with the previous frame.
    """

    def __init__(self, rng: Rng, cfg: ModelConfig):
        self.cfg = cfg
        self.z_to_cond = Linear(rng.split("dec_init"), cfg.n_z, cfg.cond_hidden)
        self.cond = GruCell(rng.split("dec_cond"), cfg.n_z, cfg.cond_hidden)
        self.embed = Linear(rng.split("dec_embed"), cfg.cond_hidden, cfg.embed_dim)
        self.bar_init = Linear(rng.split("dec_bar_init"), cfg.cond_hidden, cfg.low_hidden)
        self.low = GruCell(rng.split("dec_low"), cfg.embed_dim + cfg.n_d, cfg.low_hidden)
        self.out = Linear(rng.split("dec_out"), cfg.low_hidden, cfg.n_d)

    def conductor_states(self, z: Tensor) -> list[Tensor]:
        h = tanh(self.z_to_cond(z))
        states = []
        for _ in range(self.cfg.bars):
            h = self.cond.step(z, h)
            states.append(h)
        return states

    def _smooth_readout(self, params_t: Tensor) -> Tensor:
        """Differentiable readout used as autoregressive feedback and as f(z)."""
        kind = self.cfg.kind
        if kind == "drum":
            hits = sigmoid(params_t[:, :9])
            return concat([hits, params_t[:, 9:]], axis=-1)
        if kind == "categorical":
            shifted = params_t - Tensor(params_t.data.max(axis=-1, keepdims=True))
            e = T.exp(shifted)
            return e / T.tsum(e, axis=-1, keepdims=True)
        return params_t

    def _sampled_feedback(self, params_t: Tensor, rng: Rng) -> Tensor:
        kind = self.cfg.kind
        smooth = readout(params_t.data, kind)
        if kind == "drum":
            frame = smooth.copy()
            frame[:, :9] = (rng.uniform(shape=smooth[:, :9].shape) < smooth[:, :9])
            return Tensor(frame)
        if kind == "categorical":
            b, k = smooth.shape
            cum = smooth.cumsum(axis=-1)
            u = rng.uniform(shape=(b, 1))
            idx = (u > cum).sum(axis=-1).clip(0, k - 1)
            frame = np.zeros_like(smooth)
            frame[np.arange(b), idx] = 1.0
            return Tensor(frame)
        return Tensor(smooth)

    def decode(self, z: Tensor, teacher: SequenceBatch | None = None,
               rng: Rng | None = None, sample: bool = False) -> Tensor:
        """Raw per-frame output parameters, shape (B, n_s, n_d).

        With a teacher the previous-frame input is the teacher frame
        (teacher forcing, fully batched per bar). Without one, each step
        feeds back its own readout: the deterministic one, or a sampled
        frame when sample=True and an rng is given.
        """
        cfg = self.cfg
        if z.ndim == 1:
            z = z.reshape(1, -1)
        b = z.shape[0]
        if teacher is not None and teacher.n_steps != cfg.n_s:
            raise ValueError(
                f"teacher has {teacher.n_steps} steps, model expects {cfg.n_s}")
        cond_states = self.conductor_states(z)
        spb = cfg.steps_per_bar

        if teacher is not None:
            prev = np.zeros((b, cfg.n_s, cfg.n_d))
            prev[:, 1:, :] = teacher.frames[:, :-1, :]
            bar_outs = []
            for k, ch in enumerate(cond_states):
                emb = tanh(self.embed(ch))  # (B, E)
                emb_steps = emb.reshape(b, 1, cfg.embed_dim) + Tensor(
                    np.zeros((1, spb, 1)))
                prev_bar = Tensor(prev[:, k * spb:(k + 1) * spb, :])
                inputs = concat([emb_steps, prev_bar], axis=-1)
                h0 = tanh(self.bar_init(ch))
                hs = self.low.run_sequence(inputs, h0=h0)
                bar_outs.append(self.out(hs))
            return concat(bar_outs, axis=1)

        prev_t: Tensor | None = None
        outs: list[Tensor] = []
        for k, ch in enumerate(cond_states):
            emb = tanh(self.embed(ch))
            h = tanh(self.bar_init(ch))
            for _ in range(spb):
                if prev_t is None:
                    prev_t = Tensor(np.zeros((b, cfg.n_d)))
                x_t = concat([emb, prev_t], axis=-1)
                h = self.low.step(x_t, h)
                params_t = self.out(h)
                outs.append(params_t)
                if sample:
                    if rng is None:
                        raise ValueError("sampled decoding requires an rng")
                    prev_t = self._sampled_feedback(params_t, rng)
                else:
                    prev_t = self._smooth_readout(params_t)
        return stack(outs, axis=1)

    def decode_map(self, z: Tensor | np.ndarray) -> Tensor:
        """The smooth map f: R^{n_z} -> R^{n_s * n_d} whose Jacobian defines G.

        Free-running decoding with the deterministic readout everywhere;
        two calls with the same z are bit-identical.
        """
        single = np.ndim(z if not isinstance(z, Tensor) else z.data) == 1
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        if zt.ndim == 1:
            zt = zt.reshape(1, -1)
        params = self.decode(zt)
        smooth = self._smooth_readout_seq(params)
        flat = smooth.reshape(params.shape[0], self.cfg.n_s * self.cfg.n_d)
        return flat.reshape(-1) if single else flat

    def _smooth_readout_seq(self, params: Tensor) -> Tensor:
        kind = self.cfg.kind
        if kind == "drum":
            hits = sigmoid(params[:, :, :9])
            return concat([hits, params[:, :, 9:]], axis=-1)
        if kind == "categorical":
            shifted = params - Tensor(params.data.max(axis=-1, keepdims=True))
            e = T.exp(shifted)
            return e / T.tsum(e, axis=-1, keepdims=True)
        return params


def decode(net: DecoderNet, z, teacher: SequenceBatch | None = None,
           rng: Rng | None = None, sample: bool = False) -> Tensor:
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    return net.decode(zt, teacher=teacher, rng=rng, sample=sample)


def decode_map(net: DecoderNet, z) -> Tensor:
    return net.decode_map(z)


class SequenceVae(Module):
    """Encoder + decoder pair sharing one config."""

    def __init__(self, rng: Rng, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder = EncoderNet(rng.split("encoder"), cfg)
        self.decoder = DecoderNet(rng.split("decoder"), cfg)

    def posterior(self, x: SequenceBatch | np.ndarray) -> GaussianParams:
        return encode(self.encoder, x)

    def decode_map_np(self, z: np.ndarray) -> np.ndarray:
        """Numpy-in/numpy-out view of decode_map for analysis code."""
        return self.decoder.decode_map(np.asarray(z, dtype=np.float64)).data
