"""Flat checkpoint container: name -> (shape, float64 little-endian payload).

Layout: magic "KFLOW1", u32 entry count, then per entry a u16 name length,
utf-8 name, u8 ndim, u64 dims, raw float64 payload. Text blocks (the model
config) ride along as byte values widened to float64 so the container keeps
a single record type.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"KFLOW1"


def save_container(path, arrays: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes intact
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_container(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a KFLOW1 container")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated container")
        out = raw[off : off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(
            struct.unpack("<Q", take(8))[0] for _ in range(ndim)
        )
        n_items = int(np.prod(shape)) if shape else 1
        payload = take(n_items * 8)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after last entry")
    return arrays


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
