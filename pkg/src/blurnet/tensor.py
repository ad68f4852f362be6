"""Dense double-precision tensors and the flat "BNT1" binary format.

Tensors are thin immutable wrappers around row-major float64 numpy arrays.
They carry images, feature maps, weights and gradients everywhere in the
package. Values coming from outside (files, user code) are validated to be
finite at construction; internal math passes raw arrays around and wraps at
the boundaries via ``Tensor.wrap``.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"BNT1"


class TensorError(ValueError):
    pass


class Tensor:
    """Immutable dense tensor: a shape plus row-major float64 scalars."""

    __slots__ = ("array",)

    def __init__(self, values, shape=None):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Wrap an internally produced array without the finiteness scan."""
        t = cls.__new__(cls)
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        a.flags.writeable = False
        object.__setattr__(t, "array", a)
        return t

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the scalars."""
        return self.array.reshape(-1)

    def tolist(self):
        return self.array.tolist()

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.array, other.array)

    def __hash__(self):
        return hash((self.shape, self.array.tobytes()))


def to_array(x) -> np.ndarray:
    """Accept a Tensor or anything array-like; return a float64 ndarray."""
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def dump_tensor(t: Tensor | np.ndarray) -> bytes:
    """Serialize to the flat binary format.

    Layout: magic ``BNT1``, little-endian u32 rank, one little-endian u32 per
    extent, then the row-major payload as little-endian f64.
    """
    arr = to_array(t)
    head = _MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def load_tensor(buf: bytes) -> Tensor:
    if buf[:4] != _MAGIC:
        raise TensorError("bad magic, not a BNT1 tensor")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
    if payload.size != n:
        raise TensorError("truncated BNT1 payload")
    return Tensor(payload.reshape(shape))


def save_tensor(t, path) -> None:
    with open(path, "wb") as f:
        f.write(dump_tensor(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return load_tensor(f.read())
