"""Tests for the checksummed binary container."""

import tempfile
import traceback
from pathlib import Path

import numpy as np
import pytest

from utils.checkpoint import FORMAT_VERSION, MAGIC, decode, encode, read_container, write_container
from utils.errors import IntegrityError


def sample():
    arrays = {
        "w": np.arange(12, dtype=np.float64).reshape(3, 4),
        "b": np.array([0.5, -0.25]),
    }
    return arrays, {"kind": "sample", "rounds": 2, "nested": {"x": [1, 2]}}


def test_layout_prefix():
    blob = encode(*sample())
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:6], "little") == FORMAT_VERSION


def test_decode_restores_arrays_and_metadata():
    arrays, meta = sample()
    got_arrays, got_meta = decode(encode(arrays, meta))
    assert got_meta == meta
    assert list(got_arrays) == ["w", "b"]
    for name, arr in arrays.items():
        assert got_arrays[name].shape == arr.shape
        assert np.array_equal(got_arrays[name], arr)


def test_encoding_is_deterministic():
    assert encode(*sample()) == encode(*sample())


def test_truncated_blob_is_rejected():
    blob = encode(*sample())
    for cut in (0, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(IntegrityError):
            decode(blob[:cut])


def test_flipped_byte_fails_checksum():
    blob = bytearray(encode(*sample()))
    blob[20] ^= 0xFF
    with pytest.raises(IntegrityError):
        decode(bytes(blob))


def test_file_round_trip_and_missing_file():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "nested" / "c.bstl"
        arrays, meta = sample()
        write_container(str(path), arrays, meta)
        got_arrays, got_meta = read_container(str(path))
        assert got_meta == meta
        assert np.array_equal(got_arrays["w"], arrays["w"])
        with pytest.raises(IntegrityError):
            read_container(str(Path(tmp) / "missing.bstl"))


if __name__ == "__main__":
    print("=" * 60)
    print("rankstack - Checkpoint Container Test Suite")
    print("=" * 60)

    tests = [
        test_layout_prefix,
        test_decode_restores_arrays_and_metadata,
        test_encoding_is_deterministic,
        test_truncated_blob_is_rejected,
        test_flipped_byte_fails_checksum,
        test_file_round_trip_and_missing_file,
    ]

    passed = 0
    failed = 0
    for test in tests:
        try:
            test()
            passed += 1
        except AssertionError as e:
            failed += 1
            print(f"❌ Test failed: {test.__name__}\n   {e}\n")
        except Exception as e:
            failed += 1
            print(f"❌ Test error: {test.__name__}\n   {e}")
            traceback.print_exc()

    print("=" * 60)
    print(f"✅ Tests passed: {passed}")
    print(f"❌ Tests failed: {failed}")
    print("=" * 60)
