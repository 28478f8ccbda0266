"""Byte-level tokenizer: token ids are UTF-8 byte values (vocab 256).

Matches checkpoints built with ``tiny_checkpoint`` (vocab_size 256).  Encoding
and decoding are exact inverses on arbitrary text, so corpus roundtrips are
lossless.
"""

from __future__ import annotations

import numpy as np

VOCAB_SIZE = 256


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)


def decode(ids) -> str:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise ValueError("byte tokenizer ids must lie in [0, 256)")
    return arr.astype(np.uint8).tobytes().decode("utf-8")
