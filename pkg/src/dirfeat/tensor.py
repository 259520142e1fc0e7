"""Dense rank-4 tensors and the QDT1 tensor file format.

Every value passed between layers is a C-contiguous float64 array of shape
(n, h, w, c): sample, row, column, channel, with the channel index moving
fastest in memory.  The whole package goes through the helpers in this
module, so the layout is a single point of change.  Lower-rank data is
embedded with size-1 dims; there is no broadcasting and no stride algebra.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

MAGIC = b"QDT1"
_HEADER_BYTES = len(MAGIC) + 4 * 8  # magic + four little-endian uint64 dims


class Shape(NamedTuple):
    """Tensor dims (batch, height, width, channels); equality is field-wise."""

    n: int
    h: int
    w: int
    c: int

    @property
    def size(self) -> int:
        return self.n * self.h * self.w * self.c


def check_shape(shape) -> Shape:
    s = Shape(*(int(v) for v in shape))
    if any(v < 1 for v in s):
        raise ValueError(f"all dims must be >= 1, got {s}")
    return s


def zeros(shape) -> np.ndarray:
    """Fresh all-zero tensor; allocation failure surfaces as MemoryError."""
    return np.zeros(check_shape(shape), dtype=np.float64)


def as_tensor4(x) -> np.ndarray:
    """Validate/coerce to the canonical layout (rank 4, float64, contiguous)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 tensor, got rank {arr.ndim}")
    check_shape(arr.shape)
    return arr


def at(t: np.ndarray, i: int, y: int, x: int, k: int) -> float:
    """Bounds-checked element access.

    Negative or too-large indices raise IndexError; there is deliberately no
    python-style wraparound here.
    """
    n, h, w, c = t.shape
    for name, idx, lim in (("i", i, n), ("y", y, h), ("x", x, w), ("k", k, c)):
        if not 0 <= idx < lim:
            raise IndexError(f"index {name}={idx} out of range [0, {lim})")
    return float(t[i, y, x, k])


def _require_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    _require_same_shape(a, b)
    return a + b


def sub(a, b):
    _require_same_shape(a, b)
    return a - b


def mul(a, b):
    _require_same_shape(a, b)
    return a * b


def scale(a, s: float):
    return a * float(s)


def channel_concat(parts) -> np.ndarray:
    """Concatenate along the channel axis; parts must agree on (n, h, w).

    Part k occupies the contiguous channel band starting at the sum of the
    previous parts' channel counts, so `channel_slice` at those offsets
    recovers every input bit-exactly.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("channel_concat needs at least one tensor")
    lead = parts[0].shape[:3]
    for p in parts[1:]:
        if p.shape[:3] != lead:
            raise ValueError(f"mismatched (n, h, w): {p.shape[:3]} vs {lead}")
    if len(parts) == 1:
        return parts[0].copy()
    return np.concatenate(parts, axis=3)


def channel_slice(t: np.ndarray, start: int, stop: int) -> np.ndarray:
    if not 0 <= start < stop <= t.shape[3]:
        raise ValueError(f"bad channel band [{start}, {stop}) for c={t.shape[3]}")
    return t[:, :, :, start:stop]


def tensor_bytes(t: np.ndarray) -> bytes:
    """Serialize one tensor: magic, four uint64 LE dims, float64 LE data."""
    t = as_tensor4(t)
    head = MAGIC + np.asarray(t.shape, dtype="<u8").tobytes()
    return head + t.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Decode one tensor starting at `offset`; returns (tensor, next_offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise ValueError(f"bad magic at offset {offset}: not a QDT1 tensor")
    dims = np.frombuffer(buf, dtype="<u8", count=4, offset=offset + 4)
    shape = check_shape(dims)
    start = offset + _HEADER_BYTES
    end = start + shape.size * 8
    if end > len(buf):
        raise ValueError("truncated QDT1 tensor")
    data = np.frombuffer(buf, dtype="<f8", count=shape.size, offset=start)
    return data.reshape(shape).copy(), end


def write_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(t))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return t
