"""Sequence batches and per-kind frame semantics.

Three frame kinds share one container:
  drum        27 dims per step: 9 binary hits, 9 velocities in [0, 1],
              9 micro-timing offsets in [-0.5, 0.5] (fraction of a step)
  categorical 90 dims per step: one-hot over 88 note-on pitches + note-off + rest
  motion      50 joint angles per step, unconstrained reals
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KIND_DIMS = {"drum": 27, "categorical": 90, "motion": 50}

N_DRUMS = 9
NOTE_OFF = 88
REST = 89
N_PITCHES = 88


class SequenceError(ValueError):
    """A batch violates its kind's frame invariants."""


def frame_dim(kind: str) -> int:
    try:
        return KIND_DIMS[kind]
    except KeyError:
        raise SequenceError(f"unknown sequence kind '{kind}'") from None


@dataclass
class SequenceBatch:
    """Batch of fixed-length frame sequences, shape (n, n_s, n_d)."""

    frames: np.ndarray
    kind: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 2:  # single sequence
            self.frames = self.frames[None, :, :]
        if self.frames.ndim != 3:
            raise SequenceError(f"frames must be 3-D, got shape {self.frames.shape}")
        if self.frames.shape[-1] != frame_dim(self.kind):
            raise SequenceError(
                f"{self.kind} frames need {frame_dim(self.kind)} dims, "
                f"got {self.frames.shape[-1]}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_steps(self) -> int:
        return self.frames.shape[1]

    @property
    def n_dims(self) -> int:
        return self.frames.shape[2]

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.frames[idx], self.kind)

    def validate(self) -> "SequenceBatch":
        for i in range(len(self)):
            validate_frames(self.frames[i], self.kind, where=f"sequence {i}")
        return self

    # drum channel views -----------------------------------------------------

    def hits(self) -> np.ndarray:
        _require(self.kind == "drum", "hits() is drum-only")
        return self.frames[:, :, :N_DRUMS]

    def velocities(self) -> np.ndarray:
        _require(self.kind == "drum", "velocities() is drum-only")
        return self.frames[:, :, N_DRUMS:2 * N_DRUMS]

    def offsets(self) -> np.ndarray:
        _require(self.kind == "drum", "offsets() is drum-only")
        return self.frames[:, :, 2 * N_DRUMS:]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SequenceError(msg)


def validate_frames(seq: np.ndarray, kind: str, where: str = "sequence") -> None:
    """Check one (n_s, n_d) sequence against its kind invariants."""
    seq = np.asarray(seq, dtype=np.float64)
    if not np.all(np.isfinite(seq)):
        raise SequenceError(f"{where}: non-finite values")
    if seq.ndim != 2 or seq.shape[1] != frame_dim(kind):
        raise SequenceError(
            f"{where}: expected (n_s, {frame_dim(kind)}), got {seq.shape}")
    if kind == "drum":
        hits = seq[:, :N_DRUMS]
        vel = seq[:, N_DRUMS:2 * N_DRUMS]
        off = seq[:, 2 * N_DRUMS:]
        if not np.all((hits == 0.0) | (hits == 1.0)):
            raise SequenceError(f"{where}: drum hits must be 0 or 1")
        if vel.min() < 0.0 or vel.max() > 1.0:
            raise SequenceError(f"{where}: velocities outside [0, 1]")
        if off.min() < -0.5 or off.max() > 0.5:
            raise SequenceError(f"{where}: offsets outside [-0.5, 0.5]")
    elif kind == "categorical":
        if not np.all((seq == 0.0) | (seq == 1.0)):
            raise SequenceError(f"{where}: categorical frames must be 0/1")
        counts = seq.sum(axis=1)
        bad = np.nonzero(counts != 1.0)[0]
        if bad.size:
            raise SequenceError(
                f"{where}: frame {bad[0]} has {int(counts[bad[0]])} ones, "
                "one-hot requires exactly one")


def readout(params: np.ndarray, kind: str) -> np.ndarray:
    """Deterministic smooth readout of raw decoder outputs.

    Drum hit logits go through a sigmoid, categorical logits through a
    softmax; velocities, offsets and motion values pass through unchanged.
    """
    params = np.asarray(params, dtype=np.float64)
    if kind == "drum":
        out = params.copy()
        out[..., :N_DRUMS] = 1.0 / (1.0 + np.exp(-params[..., :N_DRUMS]))
        return out
    if kind == "categorical":
        shifted = params - params.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    return params


def quantize(smooth: np.ndarray, kind: str) -> np.ndarray:
    """Map smooth readouts onto frames satisfying the kind invariants."""
    smooth = np.asarray(smooth, dtype=np.float64)
    if kind == "drum":
        out = smooth.copy()
        out[..., :N_DRUMS] = (smooth[..., :N_DRUMS] >= 0.5).astype(np.float64)
        out[..., N_DRUMS:2 * N_DRUMS] = np.clip(smooth[..., N_DRUMS:2 * N_DRUMS], 0.0, 1.0)
        out[..., 2 * N_DRUMS:] = np.clip(smooth[..., 2 * N_DRUMS:], -0.5, 0.5)
        # silent beats carry no velocity/offset
        mask = out[..., :N_DRUMS]
        out[..., N_DRUMS:2 * N_DRUMS] *= mask
        out[..., 2 * N_DRUMS:] *= mask
        return out
    if kind == "categorical":
        idx = smooth.argmax(axis=-1)
        out = np.zeros_like(smooth)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
    return smooth
