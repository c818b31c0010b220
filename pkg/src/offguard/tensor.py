"""N-dimensional float32 tensors and their byte encoding.

A tensor is a C-contiguous numpy float32 array with non-empty shape and
every dimension >= 1. The same encoding is used on the wire and on disk:

    u32 rank | rank x u32 dims | rank-product x f32 little-endian (row-major)
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .wire import Reader, pack_u32

Tensor = np.ndarray

_F32LE = np.dtype("<f4")


def as_tensor(values, shape=None) -> Tensor:
    """Coerce to a validated float32 tensor (copying only if needed)."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    validate_shape(arr.shape)
    return arr


def validate_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("tensor shape must be non-empty")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def tensor_to_bytes(t: Tensor) -> bytes:
    t = as_tensor(t)
    out = bytearray(pack_u32(t.ndim))
    for d in t.shape:
        out += pack_u32(d)
    out += np.ascontiguousarray(t, dtype=_F32LE).tobytes()
    return bytes(out)


def read_tensor(r: Reader) -> Tensor:
    rank = r.u32()
    if rank == 0 or rank > 32:
        raise ShapeError(f"bad tensor rank {rank}")
    shape = tuple(r.u32() for _ in range(rank))
    validate_shape(shape)
    count = int(np.prod(shape))
    raw = r.take(4 * count)
    arr = np.frombuffer(raw, dtype=_F32LE).astype(np.float32).reshape(shape)
    return np.ascontiguousarray(arr)


def tensor_from_bytes(buf: bytes) -> Tensor:
    r = Reader(buf)
    t = read_tensor(r)
    r.expect_end()
    return t


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
