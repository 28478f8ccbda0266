"""Binary tensor container (`.bsc`).

Layout, all little-endian:

    bytes 0..3    magic ``BSHC``
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 byte length of the header text
    ...           UTF-8 header text: one JSON object with sorted keys
    ...           zero padding to the next 64-byte boundary
    ...           raw tensor payloads, in record order

The header object holds ``records`` (name/dtype/shape/byte_offset, in payload
order), an optional ``manifest`` describing the model, and an ``extras``
mapping for auxiliary metadata (gram token counts, compression plan, report).
Payload offsets are relative to the start of the payload section and are
64-byte aligned.  Serialization is canonical: reading a container and writing
it back yields identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"BSHC"
FORMAT_VERSION = 1
ALIGNMENT = 64

MATRIX_TYPES = ("K", "Q", "V", "O", "Up", "Gate", "Down")

_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4"}
_DTYPE_SIZE = {"f32": 4, "f64": 8, "i32": 4}
_NP_TO_DTYPE = {np.dtype("float32"): "f32", np.dtype("float64"): "f64", np.dtype("int32"): "i32"}


def _storable(array) -> np.ndarray:
    # ascontiguousarray would promote 0-d arrays to 1-D; keep shapes intact.
    arr = np.asarray(array)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class ContainerError(Exception):
    """Container format violation; ``code`` identifies the failure class."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.shape:
            n *= int(d)
        return n

    @property
    def byte_length(self) -> int:
        return self.element_count * _DTYPE_SIZE[self.dtype]


@dataclass(frozen=True)
class ModelManifest:
    """Structural description of a decoder-only model stored in a container."""

    architecture: str
    layer_count: int
    hidden: int
    mlp: int
    heads: int
    vocab: int
    context: int
    types: tuple[str, ...]
    ln_eps: float = 1e-5
    orientation: str = "y = x @ w; w stores d_in x d_out"

    def __post_init__(self):
        if self.architecture not in ("gpt2-like", "generic"):
            raise ContainerError("bad-manifest", f"unknown architecture {self.architecture!r}")
        for t in self.types:
            if t not in MATRIX_TYPES:
                raise ContainerError("bad-manifest", f"unknown matrix type {t!r}")
        for fieldname in ("layer_count", "hidden", "mlp", "heads", "vocab", "context"):
            if getattr(self, fieldname) < 1:
                raise ContainerError("bad-manifest", f"{fieldname} must be >= 1")
        if self.hidden % self.heads != 0:
            raise ContainerError(
                "bad-manifest", f"hidden {self.hidden} not divisible by heads {self.heads}"
            )

    def site_shape(self, type_tag: str) -> tuple[int, int]:
        """(d_in, d_out) of one weight matrix of the given type."""
        d, m = self.hidden, self.mlp
        shapes = {
            "K": (d, d), "Q": (d, d), "V": (d, d), "O": (d, d),
            "Up": (d, m), "Gate": (d, m), "Down": (m, d),
        }
        if type_tag not in shapes:
            raise ContainerError("bad-manifest", f"unknown matrix type {type_tag!r}")
        return shapes[type_tag]

    def site_name(self, layer: int, type_tag: str) -> str:
        return f"layers.{layer}.{type_tag}"

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "layer_count": self.layer_count,
            "hidden": self.hidden,
            "mlp": self.mlp,
            "heads": self.heads,
            "vocab": self.vocab,
            "context": self.context,
            "types": list(self.types),
            "ln_eps": self.ln_eps,
            "orientation": self.orientation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelManifest":
        try:
            return cls(
                architecture=d["architecture"],
                layer_count=int(d["layer_count"]),
                hidden=int(d["hidden"]),
                mlp=int(d["mlp"]),
                heads=int(d["heads"]),
                vocab=int(d["vocab"]),
                context=int(d["context"]),
                types=tuple(d["types"]),
                ln_eps=float(d.get("ln_eps", 1e-5)),
                orientation=d.get("orientation", "y = x @ w; w stores d_in x d_out"),
            )
        except KeyError as exc:
            raise ContainerError("bad-manifest", f"missing manifest field {exc}") from exc


@dataclass
class Container:
    """In-memory view of a `.bsc` file: header metadata plus named tensors."""

    manifest: dict | None = None
    extras: dict = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.tensors:
            raise ContainerError("duplicate-name", f"tensor {name!r} already present")
        arr = _storable(array)
        if arr.dtype not in _NP_TO_DTYPE:
            raise ContainerError("bad-dtype", f"{name}: unsupported dtype {arr.dtype}")
        self.order.append(name)
        self.tensors[name] = arr

    def tensor_f64(self, name: str) -> np.ndarray:
        """Tensor widened to float64 (model weights arrive as f32)."""
        return np.asarray(self.tensors[name], dtype=np.float64)

    def model_manifest(self) -> ModelManifest:
        if self.manifest is None:
            raise ContainerError("bad-manifest", "container has no model manifest")
        return ModelManifest.from_dict(self.manifest)

    def validate_manifest(self) -> None:
        """Check that every inventoried site resolves to a tensor of the right shape."""
        mf = self.model_manifest()
        for layer in range(mf.layer_count):
            for t in mf.types:
                name = mf.site_name(layer, t)
                if name not in self.tensors:
                    raise ContainerError("missing-tensor", f"manifest site {name!r} absent")
                shape = tuple(self.tensors[name].shape)
                if shape != mf.site_shape(t):
                    raise ContainerError(
                        "shape-mismatch",
                        f"{name}: expected {mf.site_shape(t)}, found {shape}",
                    )

    def to_bytes(self) -> bytes:
        return write_container(self.tensors, manifest=self.manifest, extras=self.extras,
                               order=self.order)


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _canonical_header(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False).encode("utf-8")


def write_container(
    tensors: Mapping[str, np.ndarray],
    manifest: dict | None = None,
    extras: dict | None = None,
    order: Iterable[str] | None = None,
) -> bytes:
    """Serialize tensors plus metadata to canonical container bytes.

    ``order`` fixes the payload order (defaults to mapping iteration order).
    """
    names = list(order) if order is not None else list(tensors.keys())
    if len(set(names)) != len(names):
        raise ContainerError("duplicate-name", "record names must be unique")
    if set(names) != set(tensors.keys()):
        raise ContainerError("bad-order", "order does not cover the tensor set exactly")

    records = []
    payloads = []
    cursor = 0
    for name in names:
        arr = _storable(tensors[name])
        if arr.dtype not in _NP_TO_DTYPE:
            raise ContainerError("bad-dtype", f"{name}: unsupported dtype {arr.dtype}")
        code = _NP_TO_DTYPE[arr.dtype]
        payload = arr.astype(_DTYPES[code], copy=False).tobytes()
        expected = int(np.prod(arr.shape, dtype=np.int64)) * _DTYPE_SIZE[code] if arr.ndim else _DTYPE_SIZE[code]
        if len(payload) != expected:
            raise ContainerError("shape-mismatch", f"{name}: payload length != shape product")
        offset = _align(cursor)
        records.append(
            {"byte_offset": offset, "dtype": code, "name": name, "shape": list(arr.shape)}
        )
        payloads.append((offset, payload))
        cursor = offset + len(payload)

    header_obj = {
        "extras": extras if extras is not None else {},
        "manifest": manifest,
        "records": records,
    }
    header = _canonical_header(header_obj)
    preamble = MAGIC + np.uint32(FORMAT_VERSION).tobytes() + np.uint64(len(header)).tobytes()
    body_start = _align(len(preamble) + len(header))

    total = body_start + (_align(cursor) if payloads else 0)
    if payloads:
        last_off, last_payload = payloads[-1]
        total = body_start + last_off + len(last_payload)
    buf = bytearray(total)
    buf[: len(preamble)] = preamble
    buf[len(preamble): len(preamble) + len(header)] = header
    for offset, payload in payloads:
        buf[body_start + offset: body_start + offset + len(payload)] = payload
    return bytes(buf)


def read_container(data: bytes) -> Container:
    """Parse container bytes; inverse of :func:`write_container`.

    Raises ``ContainerError`` with codes ``bad-magic``, ``unsupported-version``,
    ``truncated``, ``misaligned-offset``, ``duplicate-name`` or ``bad-header``.
    """
    if len(data) < 16:
        raise ContainerError("truncated", f"file is {len(data)} bytes, need at least 16")
    if data[:4] != MAGIC:
        raise ContainerError("bad-magic", f"expected {MAGIC!r}, found {bytes(data[:4])!r}")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != FORMAT_VERSION:
        raise ContainerError("unsupported-version", f"version {version} not supported")
    header_len = int(np.frombuffer(data, dtype="<u8", count=1, offset=8)[0])
    if 16 + header_len > len(data):
        raise ContainerError("truncated", "header extends past end of file")
    try:
        header_obj = json.loads(data[16: 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("bad-header", f"header is not valid JSON: {exc}") from exc
    if not isinstance(header_obj, dict) or "records" not in header_obj:
        raise ContainerError("bad-header", "header must be an object with a 'records' list")

    body_start = _align(16 + header_len)
    container = Container(
        manifest=header_obj.get("manifest"),
        extras=header_obj.get("extras", {}),
    )
    seen: set[str] = set()
    for rec in header_obj["records"]:
        try:
            record = TensorRecord(
                name=rec["name"],
                dtype=rec["dtype"],
                shape=tuple(int(d) for d in rec["shape"]),
                byte_offset=int(rec["byte_offset"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError("bad-header", f"malformed record entry: {rec!r}") from exc
        if record.dtype not in _DTYPES:
            raise ContainerError("bad-header", f"{record.name}: unknown dtype {record.dtype!r}")
        if record.name in seen:
            raise ContainerError("duplicate-name", f"record {record.name!r} repeated")
        seen.add(record.name)
        if record.byte_offset % ALIGNMENT != 0:
            raise ContainerError(
                "misaligned-offset",
                f"{record.name}: offset {record.byte_offset} not {ALIGNMENT}-byte aligned",
            )
        start = body_start + record.byte_offset
        end = start + record.byte_length
        if end > len(data):
            raise ContainerError(
                "truncated",
                f"{record.name}: payload ends at {end} but file is {len(data)} bytes",
            )
        arr = np.frombuffer(data, dtype=_DTYPES[record.dtype], count=record.element_count,
                            offset=start).reshape(record.shape)
        # frombuffer yields little-endian typed views; copy into native order.
        container.add(record.name, _storable(arr.astype(arr.dtype.newbyteorder("="))))
    return container


def write_container_file(path, container: Container) -> None:
    """Atomically write a container: temp file in the target dir, then rename."""
    data = container.to_bytes()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".bsc-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container_file(path) -> Container:
    with open(path, "rb") as fh:
        return read_container(fh.read())
