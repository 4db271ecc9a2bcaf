"""Dense matrix helpers, seeded generators and the ``HIPT`` tensor file format.

A tensor here is a plain 2-D ``numpy.ndarray`` of dtype float32, stored
row-major. Arithmetic that feeds softmax or score comparisons is done in
float64 by the callers.
"""
from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

MAGIC = b"HIPT"
_HEADER = struct.Struct("<4sI")
_DIM = struct.Struct("<Q")
# refuse headers whose payload could not possibly be addressed
_MAX_VALUES = 1 << 40


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class DimensionError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


def as_tensor(values, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous float32 matrix."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got ndim={arr.ndim}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def gen_random(
    rows: int,
    cols: int,
    seed: int,
    dist: str = "gaussian",
    positions: Sequence[int] = (),
    magnitude: float = 0.0,
) -> np.ndarray:
    """Deterministic N(0, 1) matrix, optionally with planted needles.

    With ``dist="planted_needle"`` the first component of each row listed in
    ``positions`` is increased by ``magnitude``.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if dist not in ("gaussian", "planted_needle"):
        raise ValueError(f"unknown distribution {dist!r}")
    rng = np.random.default_rng(seed)
    out = rng.standard_normal((rows, cols)).astype(np.float32)
    if dist == "planted_needle":
        for p in positions:
            if not 0 <= p < rows:
                raise IndexError(f"needle position {p} out of range for {rows} rows")
            out[p, 0] += np.float32(magnitude)
    return out


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    t = as_tensor(t)
    rows, cols = t.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 2))
        fh.write(_DIM.pack(rows))
        fh.write(_DIM.pack(cols))
        fh.write(t.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_tensor(data)


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse the bytes of a ``HIPT`` file."""
    if len(data) < _HEADER.size:
        raise TruncatedError("file shorter than the fixed header")
    magic, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if ndim != 2:
        raise DimensionError(f"ndim must be 2, got {ndim}")
    off = _HEADER.size
    if len(data) < off + 2 * _DIM.size:
        raise TruncatedError("file ends inside the dimension block")
    rows = _DIM.unpack_from(data, off)[0]
    cols = _DIM.unpack_from(data, off + _DIM.size)[0]
    off += 2 * _DIM.size
    if rows == 0 or cols == 0 or rows > _MAX_VALUES or cols > _MAX_VALUES or rows * cols > _MAX_VALUES:
        raise DimensionError(f"unsupported dimensions {rows}x{cols}")
    need = rows * cols * 4
    have = len(data) - off
    if have < need:
        raise TruncatedError(f"payload has {have // 4} values, header declares {rows * cols}")
    if have > need:
        raise TensorFormatError(f"{have - need} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off)
    arr = arr.astype(np.float32).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("payload contains NaN or Inf")
    return arr
