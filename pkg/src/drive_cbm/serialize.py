"""Binary container for named float64 tensors plus a JSON manifest.

Layout::

    b"DRVT"                    4-byte magic
    uint64 little-endian       length of the JSON header in bytes
    JSON header (UTF-8)        {"manifest": {...}, "tensors": [{"name", "shape", "offset", "count"}]}
    payload                    concatenated little-endian float64 data

Offsets in the header are relative to the start of the payload. Used for both
model checkpoints and synthetic datasets.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DRVT"
_LEN = struct.Struct("<Q")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed container. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(manifest: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.array(arr, dtype=_F64, order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = canonical_json({"manifest": dict(manifest), "tensors": entries}).encode("utf-8")
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad magic number", 0)
    if len(blob) < 12:
        raise FormatError("truncated header length", 4)
    (hlen,) = _LEN.unpack_from(blob, 4)
    start = 12 + hlen
    if len(blob) < start:
        raise FormatError(f"truncated JSON header, expected {hlen} bytes", len(blob))
    try:
        header = json.loads(blob[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", 12) from None
    if not isinstance(header, dict) or "tensors" not in header or "manifest" not in header:
        raise FormatError("header lacks 'manifest' or 'tensors'", 12)
    tensors: dict[str, np.ndarray] = {}
    expected_end = start
    for entry in header["tensors"]:
        try:
            begin = start + int(entry["offset"])
            end = begin + 8 * int(entry["count"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed tensor entry {entry!r}", 12) from None
        if begin < start or end > len(blob):
            raise FormatError(f"tensor {entry['name']!r} runs past end of file", len(blob))
        if int(np.prod(shape)) != int(entry["count"]):
            raise FormatError(f"tensor {entry['name']!r}: shape {shape} does not hold {entry['count']} values", 12)
        arr = np.frombuffer(blob, dtype=_F64, count=int(entry["count"]), offset=begin)
        tensors[entry["name"]] = arr.astype(np.float64).reshape(shape)
        expected_end = max(expected_end, end)
    if expected_end != len(blob):
        raise FormatError(f"{len(blob) - expected_end} trailing bytes after payload", expected_end)
    return header["manifest"], tensors


def write(path, manifest: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(manifest, tensors))
    tmp.replace(path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def content_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.array(a, dtype=_F64, order="C")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
