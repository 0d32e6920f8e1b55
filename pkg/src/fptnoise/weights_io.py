"""Binary weight-file format.

Layout: 8-byte magic "FPTW0001", then one record per tensor
(name length u32 LE, utf-8 name bytes, rank u32 LE, one u32 LE per dim,
payload of float64 LE values, row-major), then a u32 LE tensor-count
trailer. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FPTW0001"

# caps that turn garbage headers into FormatError instead of huge allocations
_MAX_NAME = 1 << 16
_MAX_RANK = 16
_MAX_DIM = 1 << 28


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(tensors)))


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise FormatError(
                f"truncated file: needed {count} bytes for {what} at offset "
                f"{self.offset}, only {len(self.blob) - self.offset} left"
            )
        chunk = self.blob[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse a weight file; raises FormatError with the byte offset on damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise FormatError(
            f"file too short ({len(blob)} bytes) for magic {MAGIC.decode()} "
            "plus trailer at offset 0"
        )
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(
            f"bad magic {blob[:len(MAGIC)]!r} at offset 0, expected "
            f"{MAGIC.decode()}"
        )
    cur = _Cursor(blob)
    cur.offset = len(MAGIC)
    body_end = len(blob) - 4

    tensors: dict[str, np.ndarray] = {}
    while cur.offset < body_end:
        at = cur.offset
        name_len = cur.u32("name length")
        if name_len > _MAX_NAME:
            raise FormatError(f"implausible name length {name_len} at offset {at}")
        name = cur.take(name_len, "name").decode("utf-8")
        rank = cur.u32("rank")
        if rank > _MAX_RANK:
            raise FormatError(f"implausible rank {rank} at offset {at}")
        dims = []
        for _ in range(rank):
            dim = cur.u32("dimension")
            if dim > _MAX_DIM:
                raise FormatError(f"implausible dimension {dim} at offset {at}")
            dims.append(dim)
        count = 1
        for dim in dims:
            count *= dim
        payload = cur.take(count * 8, f"payload of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if cur.offset > body_end:
            raise FormatError(
                f"record for '{name}' at offset {at} overruns the trailer"
            )

    declared = struct.unpack("<I", blob[body_end:])[0]
    if declared != len(tensors):
        raise FormatError(
            f"trailer at offset {body_end} declares {declared} tensors, "
            f"parsed {len(tensors)}"
        )
    return tensors
