"""Binary blob files: a JSON manifest plus raw little-endian arrays.

Layout: 8-byte magic, 32-byte SHA-256 of the manifest bytes, u64 manifest
length, the manifest (UTF-8 JSON), then each array's raw bytes in manifest
order.  Used for dataset caches and supernet checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"NFBLOB1\n"

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def save_blob(path, kind: str, meta: dict, arrays: dict):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            code = "f8"
        elif arr.dtype == np.int64:
            code = "i8"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.astype(_DTYPES[code]).tobytes())
    manifest = json.dumps({"kind": kind, "version": 1, "meta": meta, "arrays": entries},
                          sort_keys=True).encode("utf-8")
    digest = hashlib.sha256(manifest).digest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(digest)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_blob(path, expect_kind: str | None = None):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a blob file")
        digest = fh.read(32)
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest_bytes = fh.read(mlen)
        if hashlib.sha256(manifest_bytes).digest() != digest:
            raise ValueError(f"{path}: manifest checksum mismatch")
        manifest = json.loads(manifest_bytes)
        if expect_kind is not None and manifest["kind"] != expect_kind:
            raise ValueError(f"{path}: expected kind {expect_kind!r}, got {manifest['kind']!r}")
        arrays = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            dt = np.dtype(_DTYPES[entry["dtype"]])
            buf = fh.read(count * dt.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    return manifest["meta"], arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
