import struct

import numpy as np
import pytest

from fmjam.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from fmjam.rng import Rng


def test_roundtrip_bit_exact(tmp_path):
    rng = Rng(1, "ckpt")
    params = {
        "enc.w": rng.normal((4, 7)),
        "dec.b": rng.normal((3,)),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "model.fmjv"
    save_checkpoint(path, params, meta={"kind": "drum", "n_z": 4})
    loaded, meta = load_checkpoint(path)
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name], params[name])
        assert loaded[name].shape == params[name].shape
    assert meta == {"kind": "drum", "n_z": 4}


def test_header_layout(tmp_path):
    path = tmp_path / "m.fmjv"
    save_checkpoint(path, {"w": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == 1
    # payload is little-endian float64 at the tail
    assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.fmjv"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v9.fmjv"
    save_checkpoint(path, {"w": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 999)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
