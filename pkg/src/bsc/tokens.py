"""Token stream files (`.tok`).

16-byte header: magic ``BTOK``, u32 version, u32 vocab size, u32 reserved
(zero), followed by flat int32 little-endian token ids.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

TOK_MAGIC = b"BTOK"
TOK_VERSION = 1


class TokenStreamError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def write_tokens(ids, vocab: int) -> bytes:
    arr = np.ascontiguousarray(np.asarray(ids, dtype=np.int64).ravel())
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise TokenStreamError("token-out-of-range", f"ids must lie in [0, {vocab})")
    header = (
        TOK_MAGIC
        + np.uint32(TOK_VERSION).tobytes()
        + np.uint32(vocab).tobytes()
        + np.uint32(0).tobytes()
    )
    return header + arr.astype("<i4").tobytes()


def read_tokens(data: bytes) -> tuple[np.ndarray, int]:
    """Return (ids as int32 array, vocab size)."""
    if len(data) < 16:
        raise TokenStreamError("truncated", f"file is {len(data)} bytes, need 16-byte header")
    if data[:4] != TOK_MAGIC:
        raise TokenStreamError("bad-magic", f"expected {TOK_MAGIC!r}, found {bytes(data[:4])!r}")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != TOK_VERSION:
        raise TokenStreamError("unsupported-version", f"version {version} not supported")
    vocab = int(np.frombuffer(data, dtype="<u4", count=1, offset=8)[0])
    body = len(data) - 16
    if body % 4 != 0:
        raise TokenStreamError("truncated", "payload length is not a multiple of 4")
    ids = np.frombuffer(data, dtype="<i4", offset=16).astype(np.int32)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenStreamError("token-out-of-range", f"ids must lie in [0, {vocab})")
    return ids, vocab


def write_tokens_file(path, ids, vocab: int) -> None:
    data = write_tokens(ids, vocab)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tok-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tokens_file(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        return read_tokens(fh.read())
