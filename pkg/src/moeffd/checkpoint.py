"""Binary checkpoint format.

Layout::

    b"MFFD0001"                      8-byte magic, doubles as format version
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON, see below
    payload                          raw little-endian tensor bytes in header order

The header is ``{"tensors": [{"name", "dtype", "shape", "offset", "nbytes",
"sha256"}, ...], "meta": {...}}`` where ``offset`` is relative to the start of
the payload, ``dtype`` is ``"<f4"`` or ``"<f8"`` and ``meta`` carries the run
config snapshot, RNG states and training progress.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError

MAGIC = b"MFFD0001"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def to_bytes(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def from_bytes(blob: bytes, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {e['name']!r} is truncated")
        if verify and hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"tensor {e['name']!r} failed its checksum")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(tensors, meta))
    tmp.replace(path)
    return path


def load(path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(blob, verify)
