"""Canonical binary encoding: each field is a 4-byte big-endian length
followed by its bytes, fields in declared order. Nested records are
encoded and then embedded as a single field.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

DIGEST_SIZE = 32


def digest(content: bytes) -> bytes:
    """SHA-256 of ``content``."""
    return hashlib.sha256(content).digest()


def pack(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        f = bytes(f)
        out += len(f).to_bytes(4, "big")
        out += f
    return bytes(out)


def unpack(data: bytes, count: int | None = None) -> list[bytes]:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated length prefix")
        size = int.from_bytes(data[pos:pos + 4], "big")
        pos += 4
        if pos + size > len(data):
            raise ValueError("truncated field")
        fields.append(bytes(data[pos:pos + size]))
        pos += size
    if count is not None and len(fields) != count:
        raise ValueError(f"expected {count} fields, found {len(fields)}")
    return fields


def enc_f64(x: float) -> bytes:
    return struct.pack(">d", float(x))


def dec_f64(b: bytes) -> float:
    if len(b) != 8:
        raise ValueError("float field must be 8 bytes")
    return struct.unpack(">d", b)[0]


def enc_u64(i: int) -> bytes:
    return int(i).to_bytes(8, "big")


def dec_u64(b: bytes) -> int:
    if len(b) != 8:
        raise ValueError("integer field must be 8 bytes")
    return int.from_bytes(b, "big")


def enc_vec(v) -> bytes:
    return np.asarray(v, dtype=">f8").tobytes()


def dec_vec(b: bytes) -> np.ndarray:
    if len(b) % 8:
        raise ValueError("vector field length must be a multiple of 8")
    return np.frombuffer(b, dtype=">f8").astype(np.float64)


def enc_str(s: str) -> bytes:
    return s.encode("utf-8")


def pack_list(items: list[bytes]) -> bytes:
    return pack(enc_u64(len(items)), *items)


def unpack_list(data: bytes) -> list[bytes]:
    fields = unpack(data)
    if not fields or dec_u64(fields[0]) != len(fields) - 1:
        raise ValueError("list length prefix does not match contents")
    return fields[1:]
