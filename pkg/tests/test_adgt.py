import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from addgcn import adgt
from addgcn.adgt import AdgtFormatError


def test_header_layout_is_exact():
    buf = adgt.encode(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[:4] == b"ADGT"
    assert buf[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2I", buf[7:15]) == (1, 3)
    assert buf[15:] == np.array([1, 2, 3], dtype="<f4").tobytes()


def test_scalar_has_rank_zero():
    buf = adgt.encode(np.float32(4.5))
    assert buf[6] == 0 and len(buf) == 7 + 4
    assert adgt.decode(buf).shape == ()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bitwise(arr):
    back = adgt.decode(adgt.encode(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == np.asarray(arr, order="C").tobytes()


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    adgt.save(tmp_path / "a.adgt", arr)
    assert adgt.load(tmp_path / "a.adgt").tobytes() == arr.tobytes()


def test_non_contiguous_input_is_written_row_major():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3).T
    np.testing.assert_array_equal(adgt.decode(adgt.encode(arr)), arr)


@pytest.mark.parametrize("cut", [0, 3, 6, 9, 15, 20])
def test_truncation_error_names_offset(cut):
    buf = adgt.encode(np.ones((2, 3), np.float32))  # 7 + 8 + 24 = 39 bytes
    with pytest.raises(AdgtFormatError, match=rf"truncated .* offset {cut}"):
        adgt.decode(buf[:cut])


def test_truncated_file_names_path_and_offset(tmp_path):
    path = tmp_path / "t.adgt"
    path.write_bytes(adgt.encode(np.ones(8, np.float32))[:-5])
    with pytest.raises(AdgtFormatError, match=r"t\.adgt.*offset 38"):
        adgt.load(path)


def test_bad_magic():
    buf = b"NOPE" + adgt.encode(np.ones(2, np.float32))[4:]
    with pytest.raises(AdgtFormatError, match="bad magic"):
        adgt.decode(buf)


def test_bad_version_and_dtype():
    buf = bytearray(adgt.encode(np.ones(2, np.float32)))
    buf[4] = 2
    with pytest.raises(AdgtFormatError, match="version"):
        adgt.decode(bytes(buf))
    buf[4], buf[5] = 1, 7
    with pytest.raises(AdgtFormatError, match="dtype"):
        adgt.decode(bytes(buf))


def test_trailing_bytes_rejected():
    with pytest.raises(AdgtFormatError, match="trailing"):
        adgt.decode(adgt.encode(np.ones(2, np.float32)) + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothere"):
        adgt.load(tmp_path / "nothere.adgt")
