"""Deterministic binary container used for dataset bundles and checkpoints.

Layout::

    MAGIC (8 bytes) | header length (uint64 LE) | header JSON | payload | sha256(all previous bytes)

The header records a kind, a format version, free-form metadata and one entry
per array (name, dtype, shape, byte offset). Arrays are stored raw in
little-endian order, so a save/load cycle is bit-exact and two saves of the
same content produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVGAEBOX"
_DTYPES = {"f8": "<f8", "i8": "<i8", "u1": "|u1"}


class StoreError(Exception):
    """Raised for unreadable, truncated, corrupt or mismatched container files."""


def _canonical(arr: np.ndarray) -> tuple[str, np.ndarray]:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return "f8", np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        return "i8", np.ascontiguousarray(arr, dtype="<i8")
    if arr.dtype == np.uint8 or arr.dtype.kind == "b":
        return "u1", np.ascontiguousarray(arr, dtype="|u1")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def dumps(kind: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        code, arr = _canonical(arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "version": version, "meta": meta, "arrays": entries, "size": offset},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 8 + 32 or not data.startswith(MAGIC):
        raise StoreError("not a container file or truncated header")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise StoreError("checksum mismatch: file is corrupt or truncated")
    (hlen,) = struct.unpack("<Q", body[8:16])
    try:
        header = json.loads(body[16 : 16 + hlen])
    except ValueError as exc:
        raise StoreError(f"unreadable header: {exc}") from exc
    if header.get("kind") != kind:
        raise StoreError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    if header.get("version") != version:
        raise StoreError(f"unsupported {kind} version {header.get('version')} (expected {version})")
    payload = body[16 + hlen :]
    if len(payload) != header["size"]:
        raise StoreError("payload size mismatch")
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header["meta"], arrays


def save(path, kind: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, version, meta, arrays))


def load(path, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc
    return loads(data, kind, version)
