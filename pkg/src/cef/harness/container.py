"""Self-describing binary container shared by datasets, forecasts and checkpoints.

Layout: ``b"CEF1"`` | u32 little-endian header length | UTF-8 JSON header |
payload. The header lists every array (name, dtype, shape) in payload
order; arrays are stored contiguously in C order, little-endian.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CEF1"
KINDS = ("dataset", "forecast", "checkpoint")
_DTYPES = ("<f4", "<f8", "<i8")


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def digest(obj) -> str:
    """Content hash of a JSON-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write(path, data: bytes | str) -> Path:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def encode(kind: str, meta: dict, arrays: dict, dtypes: dict | None = None) -> bytes:
    if kind not in KINDS:
        raise ContainerError(f"unknown container kind {kind!r}")
    dtypes = dtypes or {}
    entries, chunks = [], []
    for name, arr in arrays.items():
        dt = dtypes.get(name, "<f4")
        if dt not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dt}")
        a = np.ascontiguousarray(arr, dtype=dt)
        if a.dtype.kind == "f" and not np.all(np.isfinite(a)):
            raise ContainerError(f"array {name!r} has nonfinite values")
        entries.append({"name": name, "dtype": dt, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = {"kind": kind, "meta": meta, "arrays": entries, "payload_bytes": sum(len(c) for c in chunks)}
    hbytes = canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes, kind: str | None = None):
    """Inverse of :func:`encode`; returns (kind, meta, arrays)."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError("not a CEF1 container")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise ContainerError("truncated header")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind} container, found {header.get('kind')!r}")
    payload = memoryview(blob)[8 + hlen :]
    expected = 0
    for e in header["arrays"]:
        expected += int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize
    if expected != header.get("payload_bytes") or len(payload) != expected:
        raise ContainerError(f"payload is {len(payload)} bytes, header declares {expected}")
    arrays, pos = {}, 0
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=pos).reshape(e["shape"])
        arrays[e["name"]] = arr.copy()
        pos += n * dt.itemsize
    return header["kind"], header["meta"], arrays


def write_container(path, kind: str, meta: dict, arrays: dict, dtypes: dict | None = None) -> Path:
    return atomic_write(path, encode(kind, meta, arrays, dtypes))


def read_container(path, kind: str | None = None):
    return decode(Path(path).read_bytes(), kind)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
