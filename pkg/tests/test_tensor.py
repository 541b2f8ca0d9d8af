"""Tensor type, reductions, and the binary block format."""

import io
import math
import struct

import numpy as np
import pytest

from filtag import DataError, FilterKey, FormatError, Tensor3, channel_slice, mean
from filtag.tensor import (
    TENSOR_MAGIC,
    load_tensor,
    read_tensor,
    save_tensor,
    write_tensor,
)


def test_tensor_shape_properties():
    t = Tensor3(np.zeros((3, 4, 5), dtype=np.float32))
    assert (t.channels, t.height, t.width) == (3, 4, 5)
    assert t.flat.shape == (60,)


def test_tensor_rejects_nan_and_inf():
    with pytest.raises(DataError):
        Tensor3(np.array([[[np.nan]]], dtype=np.float32))
    with pytest.raises(DataError):
        Tensor3(np.array([[[np.inf]]], dtype=np.float32))


def test_tensor_rejects_wrong_rank():
    with pytest.raises(DataError):
        Tensor3(np.zeros((2, 2), dtype=np.float32))


def test_tensor_values_immutable():
    t = Tensor3(np.zeros((1, 1, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        t.values[0, 0, 0] = 1.0


def test_from_flat_layout_and_length_check():
    t = Tensor3.from_flat(range(8), 2, 2, 2)
    assert t.values[1, 0, 0] == 4.0
    with pytest.raises(DataError):
        Tensor3.from_flat([1.0, 2.0], 1, 2, 2)


def test_channel_slice_identity_case():
    t = Tensor3(np.array([[[42.0]]], dtype=np.float32))
    assert channel_slice(t, 0).tolist() == [[42.0]]


def test_channel_slice_row_major():
    t = Tensor3.from_flat(range(8), 2, 2, 2)
    assert channel_slice(t, 1).reshape(-1).tolist() == [4.0, 5.0, 6.0, 7.0]


def test_channel_slice_matches_nested_loop_copy(rng):
    t = Tensor3(rng.uniform(-1, 1, size=(3, 4, 5)).astype(np.float32))
    for c in range(3):
        expected = np.zeros((4, 5), dtype=np.float32)
        for y in range(4):
            for x in range(5):
                expected[y, x] = t.flat[c * 4 * 5 + y * 5 + x]
        np.testing.assert_array_equal(channel_slice(t, c), expected)


def test_channel_slice_out_of_range():
    t = Tensor3(np.zeros((2, 1, 1), dtype=np.float32))
    with pytest.raises(IndexError):
        channel_slice(t, 2)
    with pytest.raises(IndexError):
        channel_slice(t, -1)


def test_mean_trivial_cases():
    assert mean([0.5]) == 0.5
    assert mean([0.0, 1.0]) == 0.5


def test_mean_empty_is_domain_error():
    with pytest.raises(ValueError):
        mean([])


def test_mean_matches_extended_precision_oracle(rng):
    values = rng.uniform(0, 1, size=1000)
    expected = math.fsum(float(v) for v in values) / values.size
    assert mean(values) == pytest.approx(expected, rel=1e-6)


def test_mean_permutation_invariant_and_bounded(rng):
    for _ in range(20):
        values = rng.uniform(-10, 10, size=int(rng.integers(1, 200)))
        m = mean(values)
        assert mean(rng.permutation(values)) == pytest.approx(m, rel=1e-6, abs=1e-12)
        assert values.min() <= m <= values.max()


def test_tensor_roundtrip_bit_exact(rng):
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
        t = Tensor3(rng.uniform(-100, 100, size=shape).astype(np.float32))
        buf = io.BytesIO()
        write_tensor(t, buf)
        buf.seek(0)
        back = read_tensor(buf)
        assert back == t
        assert back.values.tobytes() == t.values.tobytes()


def test_tensor_file_roundtrip(tmp_path):
    t = Tensor3(np.arange(12, dtype=np.float32).reshape(3, 2, 2))
    save_tensor(t, tmp_path / "t.ft3")
    assert load_tensor(tmp_path / "t.ft3") == t


def test_read_tensor_bad_magic():
    buf = io.BytesIO(b"XXXX" + bytes(13))
    with pytest.raises(FormatError, match="magic"):
        read_tensor(buf)


def test_read_tensor_bad_version():
    header = struct.pack("<4sBIII", TENSOR_MAGIC, 9, 1, 1, 1)
    with pytest.raises(FormatError, match="version"):
        read_tensor(io.BytesIO(header + bytes(4)))


def test_read_tensor_truncated_payload():
    t = Tensor3(np.ones((1, 2, 2), dtype=np.float32))
    buf = io.BytesIO()
    write_tensor(t, buf)
    data = buf.getvalue()[:-3]
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(io.BytesIO(data))


def test_read_tensor_rejects_nan_payload():
    header = struct.pack("<4sBIII", TENSOR_MAGIC, 1, 1, 1, 1)
    payload = struct.pack("<f", float("nan"))
    with pytest.raises(DataError):
        read_tensor(io.BytesIO(header + payload))


def test_filter_key_ordering():
    assert FilterKey(0, 5) < FilterKey(1, 0)
    assert FilterKey(1, 2) < FilterKey(1, 3)
    assert FilterKey(2, 7) == FilterKey(2, 7)
