"""Counter-based random streams (Philox) with named, independent substreams.

Every consumer (dataset shuffling, reparameterization noise, mixup, Jacobian
sampling, ...) draws from its own named stream, so adding a consumer never
perturbs the draws of another. Identical seed + identical call sequence gives
bit-identical samples on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(seed: int, stream: str) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{stream}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random source backed by the Philox counter-based generator."""

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = stream
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, stream)))

    def split(self, name: str) -> "Rng":
        """Independent child stream; same (seed, path) always gives the same stream."""
        return Rng(self.seed, f"{self.stream}/{name}")

    # -- draws ---------------------------------------------------------------

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    # -- state ----------------------------------------------------------------

    def state(self) -> dict:
        """Serializable stream position (counter + key), for checkpoints."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], state["stream"])
        st = rng._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        rng._gen.bit_generator.state = st
        return rng
