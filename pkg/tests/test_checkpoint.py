import struct

import numpy as np
import pytest

from frontseg import checkpoint
from frontseg.checkpoint import CheckpointError


def sample_tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.c": np.arange(5, dtype=np.float32),
            "scalar": np.array([1.5], np.float32)}


def test_roundtrip(tmp_path):
    cfg = {"model": {"depth": 5}, "meta": {"epoch": 3}}
    checkpoint.save(tmp_path / "x.ckpt", cfg, sample_tensors())
    got_cfg, got = checkpoint.load(tmp_path / "x.ckpt")
    assert got_cfg == cfg
    for k, v in sample_tensors().items():
        np.testing.assert_array_equal(got[k], v)
    assert not (tmp_path / "x.ckpt.tmp").exists()


def test_layout_header():
    blob = checkpoint.encode({"k": 1}, sample_tensors())
    assert blob[:4] == b"AUNT"
    assert struct.unpack_from("<I", blob, 4)[0] == checkpoint.VERSION
    # payload of the first tensor sits at its recorded offset, little-endian float32
    n = struct.unpack_from("<I", blob, 8)[0]
    pos = 12 + n + 4
    name_len = struct.unpack_from("<H", blob, pos)[0]
    pos += 2 + name_len
    code, rank = struct.unpack_from("<BB", blob, pos)
    pos += 2 + 4 * rank
    offset = struct.unpack_from("<Q", blob, pos)[0]
    assert code == 1 and rank == 2
    np.testing.assert_array_equal(np.frombuffer(blob, "<f4", 6, offset).reshape(2, 3), sample_tensors()["a"])


def test_encoding_is_deterministic():
    assert checkpoint.encode({"b": 1, "a": 2}, sample_tensors()) == checkpoint.encode({"a": 2, "b": 1}, sample_tensors())


def test_bad_magic_version_and_truncation():
    blob = checkpoint.encode({}, sample_tensors())
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.decode(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-4])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:20])
