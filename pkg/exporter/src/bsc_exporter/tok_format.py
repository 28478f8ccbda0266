"""Writer/reader for the `.tok` token-stream format.

16-byte header (magic ``BTOK``, u32 version, u32 vocab, u32 reserved) followed
by int32 little-endian token ids.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BTOK"
VERSION = 1


def serialize(ids, vocab: int) -> bytes:
    arr = np.asarray(ids, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise ValueError(f"token ids must lie in [0, {vocab})")
    header = MAGIC + struct.pack("<III", VERSION, vocab, 0)
    return header + arr.astype("<i4").tobytes()


def parse(data: bytes) -> tuple[np.ndarray, int]:
    if data[:4] != MAGIC:
        raise ValueError("bad magic")
    version, vocab, _ = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    return np.frombuffer(data, dtype="<i4", offset=16).astype(np.int32), vocab
