"""CTTT array container.

Layout (little-endian)::

    b"CTTT" | version:u16 | manifest_len:u32 | manifest (utf-8 JSON) | raw data

The manifest lists ``{"name", "dtype", "shape"}`` per array in storage order
plus a free-form ``meta`` mapping. Array payloads are row-major and packed
back to back in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CTTT"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_HEADER = struct.Struct("<4sHI")


class ContainerError(Exception):
    pass


class CorruptContainerError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise TypeError(f"unsupported dtype {arr.dtype}; only float32/float64 can be stored")


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    manifest = json.dumps({"meta": dict(meta or {}), "arrays": entries}, sort_keys=True).encode()
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _HEADER.size:
        raise CorruptContainerError("truncated header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise CorruptContainerError("truncated manifest")
    try:
        manifest = json.loads(blob[start : start + mlen].decode())
        entries = manifest["arrays"]
        meta = manifest["meta"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptContainerError(f"unreadable manifest: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    offset = start + mlen
    for entry in entries:
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            name = entry["name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptContainerError(f"bad manifest entry {entry!r}") from exc
        if any(s < 0 for s in shape):
            raise CorruptContainerError(f"negative extent in {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise CorruptContainerError(f"truncated data for array {name!r}")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CorruptContainerError(f"{len(blob) - offset} trailing bytes after last array")
    return arrays, meta


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    """Write atomically: a partially written file never appears under ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes())
