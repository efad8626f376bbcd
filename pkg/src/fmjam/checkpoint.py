"""Versioned binary parameter container.

Layout: magic bytes "FMJV", format version (u32 LE), manifest length
(u32 LE), manifest JSON (parameter name, shape, byte offset, plus free-form
metadata), then the little-endian float64 payloads back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMJV"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    payloads = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        shape = list(arr.shape)
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": shape, "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"params": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    mlen = struct.unpack("<I", raw[8:12])[0]
    manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    payload = raw[12 + mlen:]
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return params, manifest.get("meta", {})
