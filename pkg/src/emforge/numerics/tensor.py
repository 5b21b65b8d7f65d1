"""Immutable dense tensors and the EMT1 binary format."""

from __future__ import annotations

import itertools
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"EMT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_uid_counter = itertools.count(1)


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a checked tensor."""


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")


class Tensor:
    """A read-only numpy array with a stable identity for gradient tracking.

    Only float32 and float64 are supported. The wrapped array is marked
    non-writeable, so tensors can be shared freely across threads.
    """

    __slots__ = ("data", "uid", "__weakref__")

    def __init__(self, data, dtype=None, *, _trusted: bool = False):
        if _trusted:
            arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        else:
            if isinstance(data, Tensor):
                data = data.data
            arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64 if dtype is None else dtype)
            if arr.dtype not in _DTYPE_CODES:
                raise TypeError(f"unsupported dtype {arr.dtype}")
            check_finite(arr)
        arr.flags.writeable = False
        self.data = arr
        self.uid = next(_uid_counter)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> Tensor:
        """Wrap an op output without copying or re-checking."""
        return cls(arr, _trusted=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # Arithmetic sugar; the real work lives in numerics.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self) -> Tensor:
        from . import ops
        return ops.transpose(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# EMT1 binary format
# ---------------------------------------------------------------------------

def write_tensor(fh: BinaryIO, arr) -> None:
    """Serialize a float32/float64 array: magic, dtype, rank, u64 extents, LE data."""
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise ValueError("not an EMT1 tensor")
    code, rank = struct.unpack("<BB", head[4:])
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown EMT1 dtype code {code}")
    raw = fh.read(8 * rank)
    if len(raw) < 8 * rank:
        raise ValueError("truncated EMT1 header")
    shape = struct.unpack(f"<{rank}Q", raw)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated EMT1 payload")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
