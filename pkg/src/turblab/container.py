"""Binary tensor container used for trajectories and checkpoints.

One tensor block is laid out as:

    magic "TL1T" | format version u32 | dtype code u32 | rank u32 |
    dims (u64 each) | payload, row-major little-endian

The only payload dtype is code 0 = binary32. Values are stored in
single precision regardless of the binary64 working precision; a
round trip therefore quantizes at roughly 1e-7 relative.

A named-tensor file (checkpoints) is a sequence of records, each
record being a u32 name length, the UTF-8 name bytes, and one
complete tensor block.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TL1T"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0


class ContainerError(ValueError):
    """Raised when a file does not parse as a TL1T container."""


def write_tensor(fh, array) -> None:
    """Append one tensor block for `array` to the open binary stream."""
    # asarray keeps rank-0 inputs rank 0 (ascontiguousarray promotes to 1-d)
    arr = np.asarray(array, dtype=np.float64, order="C")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, DTYPE_FLOAT32))
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
    fh.write(arr.astype("<f4").tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    """Read one tensor block; returns a float64 array (storage is float32)."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, dtype_code = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise ContainerError(f"unknown dtype code {dtype_code}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack("<" + "Q" * rank, _read_exact(fh, 8 * rank))
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(fh, 4 * count)
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(dims)


def save_array(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_named(path, tensors) -> None:
    """Write name -> array records in order; accepts a mapping or pairs."""
    items = tensors.items() if hasattr(tensors, "items") else tensors
    with open(path, "wb") as fh:
        for name, arr in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, arr)


def load_named(path) -> dict:
    """Read a record sequence back into an ordered dict of float64 arrays."""
    out = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if head == b"":
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            out[name] = read_tensor(fh)
    return out


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ContainerError(f"truncated container: wanted {count} bytes, got {len(data)}")
    return data
