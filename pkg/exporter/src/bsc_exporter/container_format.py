"""Writer for the `.bsc` tensor container wire format.

This is the exporter's own implementation of the byte contract (the toolchain
consuming these files has its own): magic ``BSHC``, u32 version, u64 header
length, UTF-8 JSON header with sorted keys, zero padding to 64 bytes, then
little-endian payloads in record order at 64-byte-aligned offsets relative to
the payload section.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"BSHC"
VERSION = 1
ALIGN = 64

_DTYPE_CODES = {
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
    np.dtype(np.int32): "i32",
}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def serialize(tensors: list[tuple[str, np.ndarray]], manifest: dict | None,
              extras: dict | None = None) -> bytes:
    """Serialize named tensors (order preserved) plus header metadata."""
    names = [name for name, _ in tensors]
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")

    records = []
    blobs: list[tuple[int, bytes]] = []
    cursor = 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"{name}: dtype {arr.dtype} not storable")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        offset = _align(cursor)
        records.append({
            "byte_offset": offset,
            "dtype": _DTYPE_CODES[arr.dtype],
            "name": name,
            "shape": list(arr.shape),
        })
        blobs.append((offset, blob))
        cursor = offset + len(blob)

    header = json.dumps(
        {"extras": extras or {}, "manifest": manifest, "records": records},
        sort_keys=True, indent=2, ensure_ascii=False,
    ).encode("utf-8")
    preamble = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(header))
    body_start = _align(len(preamble) + len(header))

    total = body_start + cursor
    out = bytearray(total)
    out[:len(preamble)] = preamble
    out[len(preamble):len(preamble) + len(header)] = header
    for offset, blob in blobs:
        out[body_start + offset: body_start + offset + len(blob)] = blob
    return bytes(out)


def parse(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Minimal reader used for self-checks of exported files."""
    if data[:4] != MAGIC:
        raise ValueError("bad magic")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    header_len = struct.unpack_from("<Q", data, 8)[0]
    header = json.loads(data[16:16 + header_len].decode("utf-8"))
    body = _align(16 + header_len)
    dtypes = {"f32": "<f4", "f64": "<f8", "i32": "<i4"}
    tensors = {}
    for rec in header["records"]:
        count = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        arr = np.frombuffer(data, dtype=dtypes[rec["dtype"]], count=count,
                            offset=body + rec["byte_offset"])
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(arr.dtype.newbyteorder("="))
    return header, tensors
