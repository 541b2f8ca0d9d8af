"""Dense 3-D float tensors and their exact binary wire format.

Everything downstream (feature maps, filter weights, dumped activations)
is a ``Tensor3``: a row-major float32 volume with the channel as the
outermost dimension, so ``flat[c*H*W + y*W + x] == values[c, y, x]``.
Reductions accumulate in float64 and are single-threaded, which keeps
results bit-stable across runs and worker counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .errors import DataError, FormatError

TENSOR_MAGIC = b"FT3\x00"
TENSOR_VERSION = 1

_HEADER = struct.Struct("<4sBIII")  # magic, version, channels, height, width


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Immutable (channels, height, width) float32 volume with finite values."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise DataError(f"Tensor3 needs a 3-D volume, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise DataError("Tensor3 values must be finite (no NaN/Inf)")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, flat: Sequence[float], channels: int, height: int, width: int) -> "Tensor3":
        arr = np.asarray(flat, dtype=np.float32)
        if arr.size != channels * height * width:
            raise DataError(
                f"flat length {arr.size} != {channels}x{height}x{width}"
            )
        return cls(arr.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def height(self) -> int:
        return int(self.values.shape[1])

    @property
    def width(self) -> int:
        return int(self.values.shape[2])

    @property
    def flat(self) -> np.ndarray:
        """Row-major 1-D view, channel outermost."""
        return self.values.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor3):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor3(channels={self.channels}, height={self.height}, width={self.width})"


@dataclass(frozen=True, order=True)
class FilterKey:
    """Identifies one filter: convolutional layer ordinal + filter ordinal."""

    layer_id: int
    filter_index: int


def channel_slice(t: Tensor3, c: int) -> np.ndarray:
    """Return the c-th feature map as an (H, W) float32 copy."""
    if not 0 <= c < t.channels:
        raise IndexError(f"channel {c} out of range for {t.channels} channels")
    return t.values[c].copy()


def mean(values) -> float:
    """Arithmetic mean with a float64 accumulator over the given order.

    The reduction is single-threaded and deterministic, so repeated calls
    on the same input are bit-identical regardless of worker counts.
    """
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("mean of an empty sequence")
    return float(arr.mean())


def write_tensor(t: Tensor3, fp: BinaryIO) -> int:
    """Write one binary tensor block; returns the number of bytes written."""
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, t.channels, t.height, t.width)
    payload = t.values.astype("<f4", copy=False).tobytes()
    fp.write(header)
    fp.write(payload)
    return len(header) + len(payload)


def read_tensor(fp: BinaryIO) -> Tensor3:
    """Read one binary tensor block written by :func:`write_tensor`."""
    header = fp.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise FormatError("truncated tensor block: incomplete header")
    magic, version, channels, height, width = _HEADER.unpack(header)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    count = channels * height * width
    payload = fp.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(
            f"truncated tensor block: expected {4 * count} payload bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width)
    if arr.size and not np.isfinite(arr).all():
        raise DataError("tensor block contains non-finite values")
    return Tensor3(arr)


def tensor_block_size(t: Tensor3) -> int:
    return _HEADER.size + 4 * t.values.size


def save_tensor(t: Tensor3, path) -> None:
    with open(path, "wb") as fp:
        write_tensor(t, fp)


def load_tensor(path) -> Tensor3:
    with open(path, "rb") as fp:
        return read_tensor(fp)
