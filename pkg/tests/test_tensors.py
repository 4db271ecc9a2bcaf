import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hipattn.tensors import (
    BadMagicError,
    DimensionError,
    NonFiniteError,
    TruncatedError,
    decode_tensor,
    gen_random,
    read_tensor,
    write_tensor,
)


def test_gen_random_is_deterministic():
    a = gen_random(2, 2, seed=7)
    b = gen_random(2, 2, seed=7)
    assert a.tobytes() == b.tobytes()


def test_planted_needle_row():
    t = gen_random(4, 2, seed=0, dist="planted_needle", positions=[3], magnitude=10.0)
    assert t[3, 0] > 9.0
    base = gen_random(4, 2, seed=0)
    np.testing.assert_array_equal(t[:3], base[:3])


def test_needle_out_of_range():
    with pytest.raises(IndexError):
        gen_random(4, 2, seed=0, dist="planted_needle", positions=[4], magnitude=1.0)


def test_gaussian_moments():
    t = gen_random(1024, 64, seed=1)
    assert -0.05 <= t.mean() <= 0.05
    assert 0.9 <= t.var() <= 1.1
    # locked from the first build
    assert t.mean() == pytest.approx(-0.0078995, abs=1e-6)
    assert t.var() == pytest.approx(0.9919013, abs=1e-6)


def test_bad_shape_args():
    with pytest.raises(ValueError):
        gen_random(0, 3, seed=0)
    with pytest.raises(ValueError):
        gen_random(2, 2, seed=0, dist="cauchy")


def test_one_by_one_file_layout(tmp_path):
    p = tmp_path / "t.hipt"
    write_tensor(np.array([[2.5]], dtype=np.float32), p)
    raw = p.read_bytes()
    assert len(raw) == 4 + 4 + 2 * 8 + 4
    assert raw[:4] == b"HIPT"
    assert struct.unpack("<I", raw[4:8]) == (2,)
    assert struct.unpack("<QQ", raw[8:24]) == (1, 1)
    assert struct.unpack("<f", raw[24:]) == (2.5,)


def test_two_by_three_payload(tmp_path):
    p = tmp_path / "t.hipt"
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(t, p)
    raw = p.read_bytes()
    assert len(raw) == 24 + 24
    np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f4"), np.arange(6))


def test_empty_path_is_io_error():
    with pytest.raises(OSError):
        write_tensor(np.ones((1, 1), np.float32), "")


def _header(rows, cols, magic=b"HIPT", ndim=2):
    return magic + struct.pack("<I", ndim) + struct.pack("<QQ", rows, cols)


def test_bad_magic():
    with pytest.raises(BadMagicError):
        decode_tensor(_header(1, 1, magic=b"XXXX") + struct.pack("<f", 1.0))


def test_truncated_payload():
    with pytest.raises(TruncatedError):
        decode_tensor(_header(2, 2) + struct.pack("<3f", 1, 2, 3))


def test_truncated_header():
    with pytest.raises(TruncatedError):
        decode_tensor(b"HIPT\x02\x00")


def test_dimension_overflow():
    with pytest.raises(DimensionError):
        decode_tensor(_header(2**63, 2**63))
    with pytest.raises(DimensionError):
        decode_tensor(_header(1, 1, ndim=3))


def test_non_finite_payload():
    with pytest.raises(NonFiniteError):
        decode_tensor(_header(1, 2) + struct.pack("<2f", 1.0, float("nan")))


def test_errors_are_distinct():
    kinds = {BadMagicError, DimensionError, TruncatedError, NonFiniteError}
    assert len(kinds) == 4
    assert all(issubclass(k, ValueError) for k in kinds)


finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite32))
def test_round_trip(tmp_path_factory, t):
    p = tmp_path_factory.mktemp("rt") / "t.hipt"
    write_tensor(t, p)
    back = read_tensor(p)
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()
