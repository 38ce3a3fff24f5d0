"""Named-array archive.

Layout (all integers little-endian)::

    b"PGNA"                  4-byte magic
    uint32                   header length in bytes
    header                   UTF-8 JSON
    payload                  concatenated raw array bytes

The header is ``{"format_version", "metadata", "arrays", "sha256"}`` where
``arrays`` lists ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the payload, and ``sha256`` is the digest
of the payload. Arrays are stored little-endian and C-contiguous, in the
order given by the caller, so saving the same content twice gives the same
bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PGNA"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    """Raised for malformed, corrupt or incompatible archives."""


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.require(arr, requirements="C")  # keeps 0-d shapes, unlike ascontiguousarray
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        arr = _le(np.asarray(value))
        if arr.dtype == object:
            raise ArchiveError(f"array {name!r} has object dtype")
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "metadata": dict(metadata or {}),
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ArchiveError("not a named-array archive (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt archive header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive format_version {version!r} (expected {FORMAT_VERSION})")
    payload = blob[8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ArchiveError("archive checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if stop > len(payload):
            raise ArchiveError(f"array {e['name']!r} extends past end of payload")
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, header.get("metadata", {})


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, encode(arrays, metadata))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
