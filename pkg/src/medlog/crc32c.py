"""CRC-32C (Castagnoli, polynomial 0x1EDC6F41) used by the segment frame trailer.

Slicing-by-8 table form, reflected. Kept dependency-free on purpose: the
frame format is portable across client implementations, so the checksum
must not hinge on an optional native package being present.
"""

from __future__ import annotations

import struct

_POLY = 0x82F63B78  # reflected 0x1EDC6F41


def _build_tables() -> list[tuple[int, ...]]:
    base = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        base.append(crc)
    tables = [base]
    for k in range(1, 8):
        prev = tables[k - 1]
        tables.append([base[prev[i] & 0xFF] ^ (prev[i] >> 8) for i in range(256)])
    return [tuple(t) for t in tables]


_T = _build_tables()
_T0, _T1, _T2, _T3, _T4, _T5, _T6, _T7 = _T
_U64 = struct.Struct("<Q")


def crc32c(data: bytes, value: int = 0) -> int:
    """Compute the CRC-32C of *data*, optionally continuing from *value*."""
    crc = value ^ 0xFFFFFFFF
    n = len(data)
    i = 0
    end = n - (n % 8)
    while i < end:
        (word,) = _U64.unpack_from(data, i)
        word ^= crc
        crc = (
            _T7[word & 0xFF]
            ^ _T6[(word >> 8) & 0xFF]
            ^ _T5[(word >> 16) & 0xFF]
            ^ _T4[(word >> 24) & 0xFF]
            ^ _T3[(word >> 32) & 0xFF]
            ^ _T2[(word >> 40) & 0xFF]
            ^ _T1[(word >> 48) & 0xFF]
            ^ _T0[(word >> 56) & 0xFF]
        )
        i += 8
    while i < n:
        crc = (crc >> 8) ^ _T0[(crc ^ data[i]) & 0xFF]
        i += 1
    return crc ^ 0xFFFFFFFF
