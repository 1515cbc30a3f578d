"""TSR1 tensor container: named float64 matrices plus string metadata.

File layout (integers little-endian):

    bytes 0-3    magic ``TSR1``
    bytes 4-7    u32 format version (currently 1)
    bytes 8-15   u64 manifest length in bytes
    bytes 16-23  u64 payload length in bytes
    manifest     UTF-8 JSON {"tensors": [{"name", "rows", "cols", "offset"}],
                 "metadata": {str: str}}
    payload      concatenated row-major float64 blocks; offsets are byte
                 offsets into the payload region and 8-byte aligned

Writes are canonical (fixed JSON encoding, tensors in insertion order, sorted
metadata keys) so identical stores serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreFormatError
from .tensor import Matrix, as_matrix

MAGIC = b"TSR1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def _check_name(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise StoreFormatError("tensor name must be a non-empty string")
    if not name.isascii():
        raise StoreFormatError(f"tensor name must be ASCII: {name!r}")
    if any(ch in name for ch in "/\n\r\x00"):
        raise StoreFormatError(f"tensor name contains a forbidden character: {name!r}")
    return name


@dataclass
class TensorStore:
    """Ordered map of named matrices with free-form string metadata."""

    entries: dict[str, Matrix] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, matrix) -> None:
        _check_name(name)
        if name in self.entries:
            raise StoreFormatError(f"duplicate tensor name: {name!r}")
        self.entries[name] = as_matrix(matrix)

    def __getitem__(self, name: str) -> Matrix:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)


def write(store: TensorStore, path) -> None:
    """Serialize ``store`` to ``path`` in the TSR1 format."""
    tensors = []
    blocks = []
    offset = 0
    for name, arr in store.entries.items():
        _check_name(name)
        arr = as_matrix(arr)
        raw = arr.astype("<f8", copy=False).tobytes()
        tensors.append(
            {"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "offset": offset}
        )
        blocks.append(raw)
        offset += len(raw)  # block sizes are multiples of 8, alignment holds
    metadata = {str(k): str(v) for k, v in sorted(store.metadata.items())}
    manifest = json.dumps(
        {"tensors": tensors, "metadata": metadata}, separators=(",", ":"), ensure_ascii=True
    ).encode("ascii")
    header = _HEADER.pack(MAGIC, VERSION, len(manifest), offset)
    Path(path).write_bytes(header + manifest + b"".join(blocks))


def read(path) -> TensorStore:
    """Parse a TSR1 file, validating the header, manifest, and payload."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise StoreFormatError(f"malformed header: file is only {len(data)} bytes")
    magic, version, manifest_len, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise StoreFormatError(f"malformed header: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"unknown format version {version}")
    if len(data) != _HEADER.size + manifest_len + payload_len:
        raise StoreFormatError(
            f"truncated or oversized file: header promises "
            f"{_HEADER.size + manifest_len + payload_len} bytes, found {len(data)}"
        )
    try:
        manifest = json.loads(data[_HEADER.size : _HEADER.size + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreFormatError(f"malformed manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise StoreFormatError("malformed manifest: missing 'tensors' key")

    payload_start = _HEADER.size + manifest_len
    store = TensorStore()
    spans = []
    for entry in manifest["tensors"]:
        try:
            name = entry["name"]
            rows = entry["rows"]
            cols = entry["cols"]
            offset = entry["offset"]
        except (TypeError, KeyError) as exc:
            raise StoreFormatError(f"malformed tensor entry: {entry!r}") from exc
        _check_name(name)
        if not all(isinstance(x, int) for x in (rows, cols, offset)):
            raise StoreFormatError(f"non-integer tensor dimensions in entry {name!r}")
        if rows < 1 or cols < 1:
            raise StoreFormatError(f"tensor {name!r} has non-positive shape ({rows}, {cols})")
        if offset < 0 or offset % 8 != 0:
            raise StoreFormatError(f"tensor {name!r} has a misaligned offset {offset}")
        size = rows * cols * 8
        if offset + size > payload_len:
            raise StoreFormatError(f"truncated payload: tensor {name!r} overruns the region")
        if name in store.entries:
            raise StoreFormatError(f"duplicate tensor name: {name!r}")
        spans.append((offset, offset + size, name))
        block = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=payload_start + offset)
        arr = block.astype(np.float64).reshape(rows, cols)
        if not np.all(np.isfinite(arr)):
            raise StoreFormatError(f"tensor {name!r} contains non-finite values")
        store.entries[name] = arr

    spans.sort()
    for (_, end, name), (start, _, other) in zip(spans, spans[1:]):
        if start < end:
            raise StoreFormatError(f"overlapping payload offsets for {name!r} and {other!r}")

    metadata = manifest.get("metadata", {})
    if not isinstance(metadata, dict):
        raise StoreFormatError("malformed metadata: expected a JSON object")
    store.metadata = {str(k): str(v) for k, v in metadata.items()}
    return store
