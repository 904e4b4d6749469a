import json
import struct

import numpy as np
import pytest

from dipt.checkpoint import MAGIC, CheckpointError, read_container, write_container


def test_bit_exact_round_trip(tmp_path, rng):
    tensors = {"b": rng.normal(size=(3, 5)).astype(np.float32), "a": np.float32(rng.normal(size=7)),
               "scalar": np.array(np.float32(np.pi))}
    write_container(tmp_path / "x.ckpt", {"kind": "test", "d_t": 4}, tensors)
    header, back = read_container(tmp_path / "x.ckpt")
    assert header["kind"] == "test" and header["format_version"] == 1
    for k, v in tensors.items():
        assert back[k].dtype == np.dtype("<f4")
        assert back[k].tobytes() == v.astype("<f4").tobytes()


def test_layout_is_magic_length_header_payload(tmp_path):
    write_container(tmp_path / "x.ckpt", {}, {"w": np.arange(4, dtype=np.float32)})
    data = (tmp_path / "x.ckpt").read_bytes()
    assert data[:8] == MAGIC
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    assert header["tensors"]["w"] == {"offset": 0, "shape": [4], "dtype": "<f4"}
    assert np.frombuffer(data[12 + n :], "<f4").tolist() == [0.0, 1.0, 2.0, 3.0]


def test_version_mismatch_names_field(tmp_path):
    write_container(tmp_path / "x.ckpt", {"format_version": 9}, {})
    with pytest.raises(CheckpointError) as info:
        read_container(tmp_path / "x.ckpt")
    assert info.value.field == "format_version"


@pytest.mark.parametrize("cut", [4, 20, -3])
def test_truncation_detected(tmp_path, cut):
    p = tmp_path / "x.ckpt"
    write_container(p, {"k": 1}, {"w": np.ones(16, np.float32)})
    data = p.read_bytes()
    p.write_bytes(data[:cut])
    with pytest.raises(CheckpointError):
        read_container(p)


def test_flipped_payload_byte_detected(tmp_path):
    p = tmp_path / "x.ckpt"
    write_container(p, {}, {"w": np.ones(16, np.float32)})
    data = bytearray(p.read_bytes())
    data[-1] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError) as info:
        read_container(p)
    assert info.value.field == "payload_sha256"


def test_not_a_container(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"hello world, definitely not a checkpoint")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_container(tmp_path / "x.ckpt")
