"""OVW1 weight files.

Layout: the magic ``b"OVW1"`` followed by records of
``name_len:u32 | name:utf-8 | rank:u32 | dims:u32*rank | payload:f32*prod(dims)``,
all little endian, payload row-major.  Values are stored as float32 and
promoted to float64 on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"OVW1"


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise InputError("not an OVW1 file (bad magic)")
    pos = 4
    arrays: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(buf):
            raise InputError(f"truncated OVW1 file at byte {pos}")

    while pos < len(buf):
        need(4)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len + 4)
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(4 * count)
        payload = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        if name in arrays:
            raise InputError(f"duplicate record {name!r} in OVW1 file")
        arrays[name] = payload.astype(np.float64).reshape(dims)
    return arrays


def save(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
