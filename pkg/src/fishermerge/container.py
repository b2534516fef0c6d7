"""Manifest + payload container shared by checkpoints, Fisher files and
merged checkpoints.

Layout::

    b"FMERGE01" | u64 LE manifest length | UTF-8 JSON manifest | payload

The manifest carries ``kind``, free-form metadata and an ordered tensor table
of ``{name, shape, offset, nbytes}`` with offsets relative to the payload
start. Tensor payloads are little-endian float64, row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from .tensor import from_bytes, to_bytes

MAGIC = b"FMERGE01"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def encode(kind: str, meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = to_bytes(arr)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "meta": dict(meta), "tensors": table}
    head = json.dumps(manifest, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode(buf: bytes) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    if buf[:8] != MAGIC:
        raise ContainerError("not a fishermerge container (bad magic)")
    if len(buf) < 16:
        raise ContainerError("truncated header")
    (n,) = struct.unpack("<Q", buf[8:16])
    try:
        manifest = json.loads(buf[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {manifest.get('format_version')!r}")
    payload = buf[16 + n :]
    tensors = {}
    expected = 0
    for entry in manifest["tensors"]:
        off, nb = entry["offset"], entry["nbytes"]
        if off != expected or off + nb > len(payload):
            raise ContainerError(f"tensor {entry['name']!r} has an inconsistent offset")
        if entry["name"] in tensors:
            raise ContainerError(f"duplicate tensor {entry['name']!r}")
        tensors[entry["name"]] = from_bytes(payload[off : off + nb], entry["shape"])
        expected = off + nb
    if expected != len(payload):
        raise ContainerError("trailing bytes after the last tensor")
    return manifest["kind"], manifest["meta"], tensors


def write(path, kind, meta, tensors, force: bool = False) -> bytes:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass force=True to overwrite")
    buf = encode(kind, meta, tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf)
    os.replace(tmp, path)
    return buf


def read(path):
    with open(path, "rb") as f:
        return decode(f.read())


def tensors_digest(header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> str:
    """sha256 over a canonical header and every tensor's name, shape and bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    for name, arr in tensors.items():
        h.update(name.encode("utf-8"))
        h.update(json.dumps(list(arr.shape)).encode("ascii"))
        h.update(to_bytes(arr))
    return h.hexdigest()
