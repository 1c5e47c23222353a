"""Versioned binary containers for artifacts.

Layout of a container file::

    magic      8 bytes
    version    uint32 LE
    hlen       uint32 LE
    header     hlen bytes of UTF-8 JSON (sorted keys)
    payload    raw little-endian array bytes, in header order

The header holds free-form metadata plus one ``{"name", "dtype", "shape"}``
entry per array. Output bytes depend only on the inputs, so rewriting the
same object gives an identical file (and checksum).
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1", "|b1"}


def _le(arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
    arr = np.ascontiguousarray(arr, dtype=dt)
    if arr.dtype.str not in _ALLOWED:
        raise TypeError(f"unsupported dtype {arr.dtype.str}")
    return arr


def write_container(path, magic, version, meta, arrays):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    arrays = {k: _le(v) for k, v in arrays.items()}
    header = {
        "meta": meta,
        "arrays": [{"name": k, "dtype": v.dtype.str, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", version, len(hbytes)))
        fh.write(hbytes)
        for v in arrays.values():
            fh.write(v.tobytes(order="C"))


def read_container(path, magic, version):
    """Return ``(meta, arrays)``; raises ArtifactError on any mismatch."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if raw[:8] != magic:
        raise ArtifactError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise ArtifactError(f"{path}: truncated header")
    ver, hlen = struct.unpack_from("<II", raw, 8)
    if ver != version:
        raise ArtifactError(f"{path}: unsupported version {ver} (expected {version})")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt header") from exc
    off = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if off + nbytes > len(raw):
            raise ArtifactError(f"{path}: truncated payload in array {spec['name']!r}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += nbytes
    if off != len(raw):
        raise ArtifactError(f"{path}: {len(raw) - off} trailing bytes")
    return header["meta"], arrays


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
