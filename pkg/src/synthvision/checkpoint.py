"""Self-describing binary tensor store.

Layout (all integers little-endian)::

    magic       4 bytes   b"SVCK"
    version     u16       currently 1
    header_len  u32
    header      header_len bytes of canonical JSON ({"kind": ..., "config": ...})
    n_tensors   u32
    n_tensors records:
        name_len u16, name (utf-8)
        dtype    u8   (1=float32, 2=float64, 3=int64)
        ndim     u8, then ndim x u32 dims
        payload  prod(dims) * itemsize raw little-endian bytes
    checksum    32 bytes  SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError

MAGIC = b"SVCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_tensors(path, kind: str, config: dict, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    parts = [MAGIC, struct.pack("<H", VERSION)]
    header = canonical_json({"kind": kind, "config": config})
    parts += [struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    blob = body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise IntegrityError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_tensors(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Returns ``(kind, config, tensors)``; raises IntegrityError on any damage."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise IntegrityError("bad magic bytes", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise IntegrityError(f"unsupported format version {version}", 4)
    (hlen,) = r.unpack("<I", "header length")
    start = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt header ({exc})", start) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        at = r.pos
        code, ndim = r.unpack("<BB", f"dtype of {name}")
        if code not in _DTYPES:
            raise IntegrityError(f"unknown dtype code {code} for {name}", at)
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        dtype = _DTYPES[code]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    digest_at = r.pos
    digest = r.take(32, "checksum")
    if r.pos != len(blob):
        raise IntegrityError("trailing bytes after checksum", r.pos)
    if hashlib.sha256(blob[:digest_at]).digest() != digest:
        raise IntegrityError("checksum mismatch", digest_at)
    return header.get("kind", ""), header.get("config", {}), tensors
