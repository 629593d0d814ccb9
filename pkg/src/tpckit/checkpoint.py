"""Binary container for named arrays.

Layout::

    b"TPCKIT-CKPT-1\\n"
    uint64 little-endian: byte length of the JSON manifest
    JSON manifest: {"meta": {...}, "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    raw little-endian buffers, concatenated in manifest order (offsets relative to data start)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

HEADER = b"TPCKIT-CKPT-1\n"
_DTYPES = {"float64": "<f8", "int64": "<i8", "bool": "|b1"}


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    buffers = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dtype = "float64"
        elif arr.dtype.kind in "iu":
            dtype = "int64"
        elif arr.dtype.kind == "b":
            dtype = "bool"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEADER)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in buffers:
            fh.write(raw)
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(HEADER):
        raise CheckpointError(f"{path}: missing {HEADER.strip().decode()} header")
    pos = len(HEADER)
    (mlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    manifest = json.loads(blob[pos:pos + mlen])
    base = pos + mlen
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated buffer for {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, manifest["meta"]
