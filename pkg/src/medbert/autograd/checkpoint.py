"""Checkpoint files: a JSON manifest followed by little-endian array blobs.

Layout::

    offset 0   8 bytes   magic b"MEDBCKPT"
    offset 8   4 bytes   uint32 LE format version (1)
    offset 12  8 bytes   uint64 LE manifest length N
    offset 20  N bytes   UTF-8 JSON manifest (sorted keys, compact)
    offset 20+N          array blobs, concatenated in manifest order

The manifest holds ``kind`` (a type tag such as ``"med_bert"`` or
``"skipgram"``), free-form ``meta`` and a ``tensors`` list of
``{"name", "shape", "dtype", "offset", "nbytes"}`` with offsets relative to
the first blob.  Writing the result of a read reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ..errors import IoError

MAGIC = b"MEDBCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _le(arr):
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps_checkpoint(tensors: dict, kind: str, meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"kind": kind, "meta": meta or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)


def loads_checkpoint(raw: bytes):
    """Return ``(tensors, kind, meta)``."""
    if len(raw) < _PREFIX.size:
        raise IoError("checkpoint truncated")
    magic, version, n = _PREFIX.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise IoError(f"not a checkpoint (magic={magic!r}, version={version})")
    start = _PREFIX.size
    manifest = json.loads(raw[start:start + n].decode("utf-8"))
    base = start + n
    tensors = {}
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise IoError(f"checkpoint truncated inside {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, manifest["kind"], manifest["meta"]


def save_checkpoint(path, tensors: dict, kind: str, meta: dict | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    raw = dumps_checkpoint(tensors, kind, meta)
    with open(path, "wb") as fh:
        fh.write(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(raw)
