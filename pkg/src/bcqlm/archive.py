"""Portable named-tensor archive.

Layout (little-endian throughout)::

    b"BCQT" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

The manifest lists entries sorted by name with their dtype, shape, byte
offset and byte length inside the payload. Entries are written in name order,
so the file bytes depend only on the set of tensors, not on insertion order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ArchiveCorruptError, ArchiveFormatError

MAGIC = b"BCQT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


def _as_numpy(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def _dtype_code(arr: np.ndarray, name: str) -> str:
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ArchiveFormatError(f"{name}: unsupported dtype {arr.dtype}")
    return code


def encode_archive(entries: Mapping[str, object]) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(entries):
        arr = _as_numpy(entries[name])
        code = _dtype_code(arr, name)
        if code != "i64" and not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite values cannot be archived")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        manifest.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({"entries": manifest}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def decode_archive(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise ArchiveFormatError("file shorter than header")
    magic, version, head_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ArchiveFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported version {version}")
    start = _HEADER.size
    if len(blob) < start + head_len:
        raise ArchiveCorruptError("manifest truncated")
    try:
        manifest = json.loads(blob[start : start + head_len].decode("utf-8"))["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveCorruptError(f"unreadable manifest: {exc}") from exc
    payload = memoryview(blob)[start + head_len :]

    out: dict[str, np.ndarray] = {}
    end_prev = 0
    for item in manifest:
        name, code, shape = item["name"], item["dtype"], tuple(item["shape"])
        if code not in _DTYPES:
            raise ArchiveFormatError(f"{name}: unknown dtype code {code!r}")
        if name in out:
            raise ArchiveCorruptError(f"duplicate entry {name}")
        off, nbytes = item["offset"], item["nbytes"]
        if int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize != nbytes:
            raise ArchiveCorruptError(f"{name}: shape/dtype disagree with byte span")
        if off < end_prev:
            raise ArchiveCorruptError(f"{name}: overlapping payload span")
        if off + nbytes > len(payload):
            raise ArchiveCorruptError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[off : off + nbytes], dtype=_DTYPES[code]).reshape(shape)
        out[name] = arr.astype(_DTYPES[code].newbyteorder("="), copy=True)
        end_prev = off + nbytes
    return out


def write_archive(entries: Mapping[str, object], path) -> int:
    """Write ``entries`` to ``path`` and return the number of bytes written."""
    blob = encode_archive(entries)
    Path(path).write_bytes(blob)
    return len(blob)


def read_archive(path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


def state_to_entries(module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a torch module's parameters into prefixed f32 archive entries."""
    return {
        f"{prefix}/{name}": p.detach().cpu().numpy().astype(np.float32)
        for name, p in module.named_parameters()
    }


def load_entries(module, entries: Mapping[str, np.ndarray], prefix: str) -> None:
    import torch

    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            if key not in entries:
                raise ArchiveCorruptError(f"missing entry {key}")
            value = torch.from_numpy(np.asarray(entries[key]))
            if tuple(value.shape) != tuple(p.shape):
                raise ArchiveCorruptError(f"{key}: shape {tuple(value.shape)} != {tuple(p.shape)}")
            p.copy_(value.to(p.dtype))
