"""Byte-level contract of the flat tensor format and its named container."""

import struct

import numpy as np
import pytest

from latprog.errors import (
    BadMagicError,
    TensorFileError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VersionMismatchError,
)
from latprog.tensorfile import (
    MAGIC,
    VERSION,
    read_tensor,
    read_tensors,
    write_tensor,
    write_tensors,
)


def test_roundtrip_bit_identical(tmp_path, rng):
    arr = rng.random((4, 4, 4, 4)).astype(np.float32)
    path = tmp_path / "t.mrxt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.float32
    assert back.shape == arr.shape
    assert np.array_equal(back.view(np.uint32), arr.view(np.uint32))


def test_non_finite_values_survive(tmp_path):
    arr = np.array([np.nan, np.inf, -np.inf, 0.0], dtype=np.float32).reshape(2, 2)
    path = tmp_path / "t.mrxt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert np.array_equal(back.view(np.uint32), arr.view(np.uint32))


def test_2x3_file_is_47_bytes(tmp_path):
    # 4 magic + 1 version + 1 dtype + 1 ndim + 2*8 dims + 6*4 payload
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.mrxt"
    write_tensor(path, arr)
    raw = path.read_bytes()
    assert len(raw) == 47
    assert raw[:4] == MAGIC
    assert raw[4] == VERSION
    assert raw[5] == 0  # float32 dtype code
    assert raw[6] == 2  # ndim
    assert struct.unpack("<QQ", raw[7:23]) == (2, 3)
    assert np.frombuffer(raw[23:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_float64_input_stored_as_float32(tmp_path):
    arr = np.array([[0.1, 0.2]], dtype=np.float64)
    path = tmp_path / "t.mrxt"
    write_tensor(path, arr)
    assert np.array_equal(read_tensor(path), arr.astype(np.float32))


def test_bad_magic(tmp_path):
    path = tmp_path / "t.mrxt"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "t.mrxt"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_tensor(path)


def test_unsupported_dtype_code(tmp_path):
    path = tmp_path / "t.mrxt"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[5] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDtypeError):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.mrxt"
    write_tensor(path, np.zeros((4, 4), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayloadError):
        read_tensor(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.mrxt"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_error_taxonomy_is_rooted():
    for err in (BadMagicError, VersionMismatchError, UnsupportedDtypeError,
                TruncatedPayloadError):
        assert issubclass(err, TensorFileError)


class TestContainer:
    def test_roundtrip_preserves_names_and_bits(self, tmp_path, rng):
        tensors = {
            "enc/w": rng.random((3, 5)).astype(np.float32),
            "enc/b": rng.random(5).astype(np.float32),
            "scalar": np.float32(2.5) * np.ones((1,), dtype=np.float32),
        }
        path = tmp_path / "c.mrxt"
        write_tensors(path, tensors)
        back = read_tensors(path)
        assert set(back) == set(tensors)
        for name in tensors:
            assert np.array_equal(
                back[name].view(np.uint32), tensors[name].view(np.uint32)
            )

    def test_single_and_container_formats_are_distinct(self, tmp_path):
        single = tmp_path / "s.mrxt"
        write_tensor(single, np.zeros((2,), dtype=np.float32))
        with pytest.raises(TensorFileError):
            read_tensors(single)
        multi = tmp_path / "m.mrxt"
        write_tensors(multi, {"a": np.zeros((2,), dtype=np.float32)})
        with pytest.raises(TensorFileError):
            read_tensor(multi)

    def test_empty_container(self, tmp_path):
        path = tmp_path / "e.mrxt"
        write_tensors(path, {})
        assert read_tensors(path) == {}

    def test_truncated_container(self, tmp_path):
        path = tmp_path / "c.mrxt"
        write_tensors(path, {"a": np.zeros((8, 8), dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(TensorFileError):
            read_tensors(path)
