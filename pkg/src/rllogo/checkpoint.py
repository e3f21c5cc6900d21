"""Binary tensor checkpoint format.

Layout (little-endian)::

    b"RLLG" | version u32 | tensor count u32
    per tensor, names in lexicographic order:
        name length u16 | UTF-8 name | rank u8 | dims u32 × rank | f32 payload
    rng state u64
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RLLG"
VERSION = 1


class CheckpointError(Exception):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionMismatchError(CheckpointError):
    code = 12


class TruncatedCheckpointError(CheckpointError):
    code = 13


def encode(tensors: dict[str, np.ndarray], rng_state: int) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", int(rng_state) & 0xFFFFFFFFFFFFFFFF))
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], int]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedCheckpointError(f"file ends at byte {len(data)}, needed {pos + n}")
        out = data[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    (rng_state,) = struct.unpack("<Q", take(8))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes")
    return tensors, rng_state


def write_tensors(path, tensors: dict[str, np.ndarray], rng_state: int) -> None:
    with open(path, "wb") as f:
        f.write(encode(tensors, rng_state))


def read_tensors(path) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "rb") as f:
        return decode(f.read())


def bytes_to_tensor(blob: bytes) -> np.ndarray:
    """Carry opaque bytes (JSON metadata) as a float32 vector of byte values."""
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float32)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    return np.asarray(t, dtype=np.float32).astype(np.uint8).tobytes()
