"""Deterministic array container: round-trips and corruption detection."""

import numpy as np
import pytest

from maskedvit.serialize import MAGIC, ContainerError, read_container, write_container


class TestRoundTrip:
    def test_exact_values_and_dtypes(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "floats": rng.normal(size=(3, 4)),
            "ints": rng.integers(-100, 100, size=7, dtype=np.int64),
            "bytes": rng.integers(0, 256, size=(2, 5), dtype=np.uint8),
            "scalarish": np.array(3.5),
        }
        meta = {"kind": "test", "nested": {"a": [1, 2], "b": None}}
        path = tmp_path / "c.bin"
        write_container(path, meta, arrays)
        got_meta, got = read_container(path)
        assert got_meta == meta
        assert set(got) == set(arrays)
        for name, arr in arrays.items():
            assert got[name].dtype == arr.dtype
            assert got[name].shape == arr.shape
            assert got[name].tobytes() == arr.tobytes()

    def test_same_input_same_bytes_regardless_of_dict_order(self, tmp_path):
        a = np.arange(4.0)
        b = np.arange(3, dtype=np.int64)
        p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
        write_container(p1, {"x": 1}, {"a": a, "b": b})
        write_container(p2, {"x": 1}, {"b": b, "a": a})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rewrite_is_byte_identical(self, tmp_path):
        path = tmp_path / "c.bin"
        arrays = {"w": np.random.default_rng(1).normal(size=(5, 5))}
        write_container(path, {"v": 2}, arrays)
        first = path.read_bytes()
        write_container(path, {"v": 2}, arrays)
        assert path.read_bytes() == first

    def test_non_contiguous_input_accepted(self, tmp_path):
        base = np.arange(24.0).reshape(4, 6)
        path = tmp_path / "c.bin"
        write_container(path, {}, {"strided": base[:, ::2]})
        _, got = read_container(path)
        np.testing.assert_array_equal(got["strided"], base[:, ::2])

    def test_empty_arrays_dict(self, tmp_path):
        path = tmp_path / "c.bin"
        write_container(path, {"only": "meta"}, {})
        meta, arrays = read_container(path)
        assert meta == {"only": "meta"} and arrays == {}


class TestRejections:
    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(ContainerError):
            write_container(tmp_path / "c.bin", {}, {"f32": np.zeros(2, dtype=np.float32)})

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"NOTMYFMT" + b"\x00" * 32)
        with pytest.raises(ContainerError, match="magic"):
            read_container(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "c.bin"
        write_container(path, {}, {"w": np.arange(16.0)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ContainerError, match="truncated"):
            read_container(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "c.bin"
        write_container(path, {}, {"w": np.arange(4.0)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ContainerError, match="trailing"):
            read_container(path)

    def test_corrupt_header_json(self, tmp_path):
        import struct

        path = tmp_path / "c.bin"
        header = b"{not json"
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
        with pytest.raises(ContainerError, match="header"):
            read_container(path)
